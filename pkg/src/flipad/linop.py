"""Matrix-free 2D (transposed) convolution operators.

Kernel layouts follow the usual deep-learning convention:

* ordinary convolution: ``kernel[out_channel, in_channel, kh, kw]``
* transposed convolution: ``kernel[in_channel, out_channel, kh, kw]``

With this convention a convolution and the transposed convolution built from
the *same* kernel tensor (and the same stride/padding/dilation) are adjoint to
each other, which is how the transposed layer is defined in the first place.

Dense materialization builds the operator the way it is usually drawn on paper:
a Toeplitz matrix over the zero-padded, flattened input whose non-conformal and
off-stride rows are deleted, after which the columns belonging to zero-padding
are deleted as well.  Deleting those columns is equivalent to zero-padding the
input, since padded entries are always multiplied by zero.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ShapeError, SizeGuardError
from .rng import make_rng, standard_normal

MAX_DENSE_ENTRIES = 2**22


def _pair(v):
    if np.isscalar(v):
        return (int(v), int(v))
    a, b = v
    return (int(a), int(b))


@dataclass(frozen=True, eq=False)
class ConvSpec:
    kernel: np.ndarray
    bias: np.ndarray | None = None
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    dilation: tuple = (1, 1)
    transposed: bool = False
    output_padding: tuple = field(default=(0, 0))

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 4:
            raise ShapeError(f"kernel must be 4-D, got shape {k.shape}")
        if k.shape[2] < 1 or k.shape[3] < 1:
            raise ShapeError(f"kernel spatial dims must be >= 1, got {k.shape[2:]}")
        object.__setattr__(self, "kernel", k)
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if b.shape != (self.out_channels,):
                raise ShapeError(f"bias must have shape ({self.out_channels},), got {b.shape}")
            object.__setattr__(self, "bias", b)
        for name in ("stride", "padding", "dilation", "output_padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError("stride and dilation must be positive")
        if min(self.padding) < 0 or min(self.output_padding) < 0:
            raise ValueError("padding must be nonnegative")
        if not self.transposed and self.output_padding != (0, 0):
            raise ValueError("output_padding only applies to transposed convolutions")
        if any(op >= s for op, s in zip(self.output_padding, self.stride)):
            raise ValueError("output_padding must be smaller than stride")

    @property
    def in_channels(self):
        return self.kernel.shape[0] if self.transposed else self.kernel.shape[1]

    @property
    def out_channels(self):
        return self.kernel.shape[1] if self.transposed else self.kernel.shape[0]

    @property
    def kernel_size(self):
        return self.kernel.shape[2], self.kernel.shape[3]

    def output_shape(self, in_shape):
        """Output shape ``(C_out, H_out, W_out)`` for input ``(C_in, H, W)``."""
        c, h, w = _check_in_shape(self, in_shape)
        dims = []
        for n, k, s, p, d, op in zip(
            (h, w), self.kernel_size, self.stride, self.padding, self.dilation, self.output_padding
        ):
            if self.transposed:
                out = (n - 1) * s - 2 * p + d * (k - 1) + 1 + op
            else:
                out = (n + 2 * p - d * (k - 1) - 1) // s + 1
            if out < 1:
                raise ShapeError(f"input spatial size {(h, w)} gives empty output for {self!r}")
            dims.append(out)
        return (self.out_channels, dims[0], dims[1])

    def without_bias(self):
        return replace(self, bias=None)

    def __repr__(self):
        kind = "ConvTranspose" if self.transposed else "Conv"
        return (
            f"{kind}Spec(kernel={self.kernel.shape}, stride={self.stride}, "
            f"padding={self.padding}, dilation={self.dilation})"
        )


def _check_in_shape(spec, in_shape):
    in_shape = tuple(int(s) for s in in_shape)
    if len(in_shape) != 3 or in_shape[0] != spec.in_channels:
        raise ShapeError(
            f"expected input shape ({spec.in_channels}, H, W), got {in_shape}"
        )
    return in_shape


def _as_batch(x, expected_trailing=None, what="input"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        batched = False
        x = x[None]
    elif x.ndim == 4:
        batched = True
    else:
        raise ShapeError(f"{what} must be (C, H, W) or (N, C, H, W), got shape {x.shape}")
    if expected_trailing is not None and tuple(x.shape[1:]) != tuple(expected_trailing):
        raise ShapeError(f"{what} shape mismatch: expected {tuple(expected_trailing)}, got {tuple(x.shape[1:])}")
    return x, batched


def _window(offset, count, step):
    return slice(offset, offset + step * (count - 1) + 1, step)


def _conv_forward(kernel, x, stride, padding, dilation, out_hw):
    """Plain cross-correlation, kernel (O, C, kh, kw), x (N, C, H, W)."""
    (sh, sw), (ph, pw), (dh, dw) = stride, padding, dilation
    ho, wo = out_hw
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((x.shape[0], kernel.shape[0], ho, wo))
    for a in range(kernel.shape[2]):
        rows = _window(a * dh, ho, sh)
        for b in range(kernel.shape[3]):
            patch = xp[:, :, rows, _window(b * dw, wo, sw)]
            out += np.einsum("oc,nchw->nohw", kernel[:, :, a, b], patch)
    return out


def _conv_backward(kernel, y, stride, padding, dilation, in_hw):
    """Adjoint of :func:`_conv_forward` with respect to its input."""
    (sh, sw), (ph, pw), (dh, dw) = stride, padding, dilation
    h, w = in_hw
    ho, wo = y.shape[2:]
    gp = np.zeros((y.shape[0], kernel.shape[1], h + 2 * ph, w + 2 * pw))
    for a in range(kernel.shape[2]):
        rows = _window(a * dh, ho, sh)
        for b in range(kernel.shape[3]):
            gp[:, :, rows, _window(b * dw, wo, sw)] += np.einsum(
                "oc,nohw->nchw", kernel[:, :, a, b], y
            )
    return gp[:, :, ph : ph + h, pw : pw + w]


def _linear_apply(spec, x):
    _, h, w = x.shape[1:]
    c_out, ho, wo = spec.output_shape(x.shape[1:])
    if spec.transposed:
        # the transposed layer is the adjoint of the ordinary conv from (C_out, ho, wo)
        return _conv_backward(spec.kernel, x, spec.stride, spec.padding, spec.dilation, (ho, wo))
    return _conv_forward(spec.kernel, x, spec.stride, spec.padding, spec.dilation, (ho, wo))


def conv_apply(spec, x):
    """Apply the layer (including bias) to ``x`` of shape (C, H, W) or (N, C, H, W)."""
    xb, batched = _as_batch(x)
    _check_in_shape(spec, xb.shape[1:])
    out = _linear_apply(spec, xb)
    if spec.bias is not None:
        out = out + spec.bias[None, :, None, None]
    return out if batched else out[0]


def conv_adjoint(spec, y, in_shape):
    """Apply the adjoint of the (bias-free) layer to a cotangent ``y``.

    ``in_shape`` is the (C, H, W) shape of the forward input; it is needed
    because several input sizes can map to the same output size.
    """
    in_shape = _check_in_shape(spec, in_shape)
    out_shape = spec.output_shape(in_shape)
    yb, batched = _as_batch(y, out_shape, what="cotangent")
    _, h, w = in_shape
    if spec.transposed:
        res = _conv_forward(spec.kernel, yb, spec.stride, spec.padding, spec.dilation, (h, w))
    else:
        res = _conv_backward(spec.kernel, yb, spec.stride, spec.padding, spec.dilation, (h, w))
    return res if batched else res[0]


def transposed_twin(spec, in_shape):
    """The layer that is the exact adjoint of ``spec`` on inputs of shape ``in_shape``.

    Same kernel tensor, stride, padding and dilation with the ``transposed``
    flag flipped; ``output_padding`` is chosen so the twin maps back onto
    ``in_shape``.
    """
    in_shape = _check_in_shape(spec, in_shape)
    out_shape = spec.output_shape(in_shape)
    if spec.transposed:
        return ConvSpec(spec.kernel, None, spec.stride, spec.padding, spec.dilation, False)
    base = ConvSpec(spec.kernel, None, spec.stride, spec.padding, spec.dilation, True)
    natural = base.output_shape(out_shape)
    op = (in_shape[1] - natural[1], in_shape[2] - natural[2])
    return replace(base, output_padding=op)


def _toeplitz_conv_matrix(kernel2d, in_hw, stride, padding, dilation, out_hw):
    """Single-channel conv matrix via Toeplitz-with-deletions."""
    (sh, sw), (ph, pw), (dh, dw) = stride, padding, dilation
    h, w = in_hw
    hp, wp = h + 2 * ph, w + 2 * pw
    kh, kw = kernel2d.shape
    n = hp * wp
    # generating sequence: g_{-(a*dh*wp + b*dw)} = k[a, b]
    T = np.zeros((n, n))
    for a in range(kh):
        for b in range(kw):
            shift = a * dh * wp + b * dw
            idx = np.arange(n - shift)
            T[idx, idx + shift] += kernel2d[a, b]
    # keep rows whose window is conformal and lies on the stride grid
    ho, wo = out_hw
    keep_rows = (np.arange(ho)[:, None] * sh * wp + np.arange(wo)[None, :] * sw).ravel()
    # keep columns that are real (non-padding) input pixels
    keep_cols = ((np.arange(h)[:, None] + ph) * wp + (np.arange(w)[None, :] + pw)).ravel()
    return T[np.ix_(keep_rows, keep_cols)]


def materialize_matrix(spec, in_shape, max_entries=MAX_DENSE_ENTRIES):
    """Dense matrix ``M`` with ``M @ vec(z) == vec(conv_apply(spec, z))`` (bias excluded)."""
    in_shape = _check_in_shape(spec, in_shape)
    out_shape = spec.output_shape(in_shape)
    d_in = int(np.prod(in_shape))
    d_out = int(np.prod(out_shape))
    if spec.transposed:
        twin = transposed_twin(spec, in_shape)
        return materialize_matrix(twin, out_shape, max_entries).T.copy()
    c_in, h, w = in_shape
    c_out, ho, wo = out_shape
    hp, wp = h + 2 * spec.padding[0], w + 2 * spec.padding[1]
    if max(d_in * d_out, (hp * wp) ** 2) > max_entries:
        raise SizeGuardError(
            f"dense matrix of {d_out}x{d_in} (Toeplitz {hp * wp}^2) exceeds {max_entries} entries"
        )
    M = np.zeros((d_out, d_in))
    bo, bi = ho * wo, h * w
    for o in range(c_out):
        for c in range(c_in):
            M[o * bo : (o + 1) * bo, c * bi : (c + 1) * bi] = _toeplitz_conv_matrix(
                spec.kernel[o, c], (h, w), spec.stride, spec.padding, spec.dilation, (ho, wo)
            )
    return M


def kernel_index_map(spec, in_shape, max_entries=MAX_DENSE_ENTRIES):
    """Integer matrix giving, per entry of the materialized matrix, the 1-based flat
    kernel index it was copied from (0 where the entry is structurally zero)."""
    labels = np.arange(1, spec.kernel.size + 1, dtype=np.float64).reshape(spec.kernel.shape)
    labelled = replace(spec, kernel=labels, bias=None)
    return np.rint(materialize_matrix(labelled, in_shape, max_entries)).astype(np.int64)


def operator_norm_sq(spec, in_shape, iters=100, seed=0):
    """Power-iteration estimate of the largest eigenvalue of ``G^T G``.

    The returned Rayleigh quotient never overestimates the true value.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    in_shape = _check_in_shape(spec, in_shape)
    lin = spec.without_bias()
    return power_iteration(
        lambda v: conv_apply(lin, v), lambda r: conv_adjoint(lin, r, in_shape), in_shape, iters, seed
    )


def power_iteration(apply, adjoint, in_shape, iters=100, seed=0):
    """Largest eigenvalue of ``adjoint(apply(.))`` by power iteration from a seeded start."""
    v = standard_normal(make_rng(seed), in_shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = adjoint(apply(v))
        nrm = np.linalg.norm(w)
        if nrm == 0.0 or not np.isfinite(nrm):
            return 0.0 if nrm == 0.0 else float(nrm)
        v = w / nrm
    gv = apply(v)
    est = float(np.vdot(gv, gv))
    return est
