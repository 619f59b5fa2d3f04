"""Toy deep generators ``x = s_L(G_L(s_{L-1}(... G_1(z))))``.

A generator is an ordered list of :class:`Layer` objects, each a linear map
(:class:`Dense` or :class:`~flipad.linop.ConvSpec`) followed by an
:class:`Activation`.  Everything runs on batches ``(N, ...)``; unbatched
inputs are accepted and returned unbatched.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tnsr
from .errors import ShapeError, TnsrFormatError
from .linop import ConvSpec, conv_adjoint, conv_apply
from .rng import make_rng, standard_normal

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid", "identity")
INVERTIBLE = ("tanh", "sigmoid", "identity")


@dataclass(frozen=True)
class Activation:
    kind: str = "identity"
    slope: float = 0.01

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "leaky_relu" and not (np.isfinite(self.slope) and self.slope > 0):
            raise ValueError("leaky_relu slope must be finite and positive")

    def __call__(self, x):
        k = self.kind
        if k == "relu":
            return np.maximum(x, 0.0)
        if k == "leaky_relu":
            return np.where(x > 0, x, self.slope * x)
        if k == "tanh":
            return np.tanh(x)
        if k == "sigmoid":
            return 0.5 * (1.0 + np.tanh(0.5 * x))
        return x

    def derivative(self, pre):
        """Derivative at pre-activation ``pre``; relu'(0) is taken as 0."""
        k = self.kind
        if k == "relu":
            return (pre > 0).astype(np.float64)
        if k == "leaky_relu":
            return np.where(pre > 0, 1.0, self.slope)
        if k == "tanh":
            return 1.0 - np.tanh(pre) ** 2
        if k == "sigmoid":
            s = self(pre)
            return s * (1.0 - s)
        return np.ones_like(pre)

    @property
    def invertible(self):
        return self.kind in INVERTIBLE


@dataclass(frozen=True, eq=False)
class Dense:
    """Fully connected layer ``W x + b`` whose output is reshaped to ``out_shape``."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    out_shape: tuple | None = None

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if w.ndim != 2:
            raise ShapeError(f"dense weight must be 2-D, got {w.shape}")
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if b.shape != (w.shape[0],):
                raise ShapeError(f"dense bias must have shape ({w.shape[0]},), got {b.shape}")
            object.__setattr__(self, "bias", b)
        out = (w.shape[0],) if self.out_shape is None else tuple(int(s) for s in self.out_shape)
        if int(np.prod(out)) != w.shape[0]:
            raise ShapeError(f"out_shape {out} does not hold {w.shape[0]} outputs")
        object.__setattr__(self, "out_shape", out)

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.weight.shape[1]:
            raise ShapeError(f"dense layer expects {self.weight.shape[1]} inputs, got shape {tuple(in_shape)}")
        return self.out_shape


@dataclass(eq=False)
class Layer:
    linear: object
    activation: Activation = field(default_factory=Activation)


def _linear_forward(lin, x):
    if isinstance(lin, Dense):
        n = x.shape[0]
        y = x.reshape(n, -1) @ lin.weight.T
        if lin.bias is not None:
            y = y + lin.bias
        return y.reshape((n,) + lin.out_shape)
    return conv_apply(lin, x)


def _linear_adjoint(lin, g, in_shape):
    if isinstance(lin, Dense):
        n = g.shape[0]
        return (g.reshape(n, -1) @ lin.weight).reshape((n,) + tuple(in_shape))
    return conv_adjoint(lin, g, in_shape)


@dataclass(eq=False)
class GeneratorSpec:
    layers: list
    latent_dim: object  # int, or a tuple for tensor-shaped latents
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        shape = (self.latent_dim,) if np.isscalar(self.latent_dim) else tuple(self.latent_dim)
        self.latent_shape = tuple(int(s) for s in shape)
        self.latent_dim = int(np.prod(self.latent_shape))
        if self.latent_dim < 1 or not self.layers:
            raise ValueError("generator needs latent_dim >= 1 and at least one layer")
        shapes = [self.latent_shape]
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, Layer):
                layer = Layer(*layer)
                self.layers[i] = layer
            try:
                shapes.append(tuple(layer.linear.output_shape(shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {i}: {exc}") from exc
        self.shapes = shapes

    @property
    def depth(self):
        return len(self.layers)

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def final_layer(self):
        return self.layers[-1]

    def input_shape_of(self, index):
        """Input shape of the layer at 0-based ``index``."""
        return self.shapes[index]


def _latent_batch(gen, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape in ((gen.latent_dim,), gen.latent_shape):
        return z.reshape((1,) + gen.latent_shape), False
    if z.ndim >= 2 and z.shape[1:] in ((gen.latent_dim,), gen.latent_shape):
        return z.reshape((z.shape[0],) + gen.latent_shape), True
    raise ShapeError(f"latent must have shape {gen.latent_shape} or (N, {gen.latent_dim}), got {z.shape}")


def _run(gen, z, stop, keep=False):
    x = z
    cache = []
    for i, layer in enumerate(gen.layers[:stop]):
        try:
            pre = _linear_forward(layer.linear, x)
        except ShapeError as exc:
            raise ShapeError(f"layer {i}: {exc}") from exc
        if keep:
            cache.append(pre)
        x = layer.activation(pre)
    return x, cache


def forward(gen, z):
    """Generate outputs for latent ``z`` of shape (D0,) or (N, D0)."""
    zb, batched = _latent_batch(gen, z)
    x, _ = _run(gen, zb, gen.depth)
    return x if batched else x[0]


def hidden_activation(gen, z, depth=None):
    """Activation after the first ``depth`` layers (default ``L - 1``)."""
    depth = gen.depth - 1 if depth is None else int(depth)
    if not 0 < depth < gen.depth:
        raise ValueError(f"depth must be in (0, {gen.depth}), got {depth}")
    zb, batched = _latent_batch(gen, z)
    x, _ = _run(gen, zb, depth)
    return x if batched else x[0]


def sample_latent(n, latent_dim, seed):
    """``n`` standard-normal latents of dimension ``latent_dim``."""
    if n < 1 or latent_dim < 1:
        raise ValueError("n and latent_dim must be >= 1")
    return standard_normal(make_rng(seed), (n, latent_dim))


def mean_activation(gen, n, seed, batch_size=4096):
    """Monte-Carlo estimate of the expected penultimate activation.

    For a single-layer generator the penultimate activation is the latent itself.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    z = sample_latent(n, gen.latent_dim, seed)
    total = np.zeros(gen.shapes[-2])
    for start in range(0, n, batch_size):
        zb, _ = _latent_batch(gen, z[start : start + batch_size])
        h, _ = _run(gen, zb, gen.depth - 1)
        total += h.sum(axis=0)
    return total / n


def vjp(gen, z, cotangent):
    """``J(z)^T cotangent`` for the full generator, by reverse traversal."""
    zb, batched = _latent_batch(gen, z)
    g = np.asarray(cotangent, dtype=np.float64)
    if not batched:
        g = g[None]
    if g.shape != (zb.shape[0],) + gen.output_shape:
        raise ShapeError(f"cotangent shape {g.shape[1:]} != generator output {gen.output_shape}")
    _, pres = _run(gen, zb, gen.depth, keep=True)
    for i in range(gen.depth - 1, -1, -1):
        layer = gen.layers[i]
        g = g * layer.activation.derivative(pres[i])
        g = _linear_adjoint(layer.linear, g, gen.shapes[i])
    return g if batched else g[0]


def forward_and_vjp(gen, z, residual_fn):
    """Forward pass plus the vjp of ``residual_fn(x)`` (returns cotangent) in one sweep."""
    x, pres = _run(gen, z, gen.depth, keep=True)
    g = residual_fn(x)
    for i in range(gen.depth - 1, -1, -1):
        layer = gen.layers[i]
        g = g * layer.activation.derivative(pres[i])
        g = _linear_adjoint(layer.linear, g, gen.shapes[i])
    return x, g


# --- construction -----------------------------------------------------------

def toy_generator(seed, latent_dim=32, out_channels=1, final_bias=True):
    """Small DCGAN-style generator: dense to 16x4x4, then two stride-2 transposed
    convolutions (16->8 relu, 8->out_channels tanh) giving a 16x16 output."""
    rng = make_rng(seed)

    def normal(shape, std):
        return std * standard_normal(rng, shape)

    layers = [
        Layer(
            Dense(normal((256, latent_dim), np.sqrt(2.0 / latent_dim)), normal(256, 0.1), (16, 4, 4)),
            Activation("relu"),
        ),
        Layer(
            ConvSpec(normal((16, 8, 4, 4), np.sqrt(2.0 / (4 * 16))), normal(8, 0.1), stride=2, padding=1, transposed=True),
            Activation("relu"),
        ),
        Layer(
            ConvSpec(
                normal((8, out_channels, 4, 4), np.sqrt(1.0 / (4 * 8))),
                normal(out_channels, 0.1) if final_bias else None,
                stride=2,
                padding=1,
                transposed=True,
            ),
            Activation("tanh"),
        ),
    ]
    return GeneratorSpec(layers, latent_dim)


def linear_generator(weight, bias=None, activation="identity", out_shape=None):
    weight = np.asarray(weight, dtype=np.float64)
    return GeneratorSpec([Layer(Dense(weight, bias, out_shape), Activation(activation))], weight.shape[1])


# --- persistence ------------------------------------------------------------

MANIFEST = "manifest.json"


def save_weights(gen, path):
    """Write TNSR tensors plus ``manifest.json`` describing the layer stack."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, layer in enumerate(gen.layers):
        lin = layer.linear
        entry = {"activation": {"kind": layer.activation.kind, "slope": layer.activation.slope}}
        if isinstance(lin, Dense):
            entry.update(kind="dense", out_shape=list(lin.out_shape))
        else:
            entry.update(
                kind="conv_transpose" if lin.transposed else "conv",
                stride=list(lin.stride),
                padding=list(lin.padding),
                dilation=list(lin.dilation),
                output_padding=list(lin.output_padding),
            )
        weight = lin.weight if isinstance(lin, Dense) else lin.kernel
        entry["weight"] = f"layer{i}_weight.tnsr"
        tnsr.save(path / entry["weight"], weight, dtype=np.float64)
        if lin.bias is not None:
            entry["bias"] = f"layer{i}_bias.tnsr"
            tnsr.save(path / entry["bias"], lin.bias, dtype=np.float64)
        entries.append(entry)
    manifest = {"format": "flipad-generator", "version": 1, "latent_shape": list(gen.latent_shape), "layers": entries}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return path


def load_weights(path):
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except json.JSONDecodeError as exc:
        raise TnsrFormatError(f"invalid manifest JSON: {exc.msg}", offset=exc.pos) from exc
    layers = []
    for i, entry in enumerate(manifest["layers"]):
        weight = tnsr.load(path / entry["weight"]).astype(np.float64)
        bias = tnsr.load(path / entry["bias"]).astype(np.float64) if "bias" in entry else None
        act = Activation(entry["activation"]["kind"], entry["activation"].get("slope", 0.01))
        kind = entry["kind"]
        if kind == "dense":
            lin = Dense(weight, bias, tuple(entry["out_shape"]))
        elif kind in ("conv", "conv_transpose"):
            lin = ConvSpec(
                weight,
                bias,
                stride=tuple(entry["stride"]),
                padding=tuple(entry["padding"]),
                dilation=tuple(entry["dilation"]),
                transposed=kind == "conv_transpose",
                output_padding=tuple(entry.get("output_padding", (0, 0))),
            )
        else:
            raise ValueError(f"layer {i}: unknown kind {kind!r}")
        layers.append(Layer(lin, act))
    return GeneratorSpec(layers, tuple(manifest["latent_shape"]))
