"""Final-layer inversion features.

For an observed output ``x`` the extractor

1. undoes the last activation (``o = s_L^{-1}(x)``, after clamping into the open
   range of ``s_L``) and subtracts the final-layer bias,
2. solves ``min ||G_L z - o||^2 + lam * ||z - zbar||_1`` where ``zbar`` is the
   Monte-Carlo mean of the penultimate activation,
3. optionally max-pools the recovered activation and keeps a subset of channels.

Because ``zbar`` is the typical activation of *this* generator, samples the
generator actually produced are explained by small, sparse departures from
``zbar``; outputs of other sources need larger or differently structured ones.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, SizeGuardError, UnsupportedActivationError
from .generator import Dense, mean_activation
from .lasso import LassoProblem, LinearMap, SolverConfig, default_step, fista_batch
from .linop import materialize_matrix

CHUNK = 256


@dataclass
class FlipadConfig:
    lam: float = 5e-4
    clamp_delta: float = 1e-6
    solver: SolverConfig = field(default_factory=SolverConfig)
    pool: tuple | None = None
    channel_top_k: int | None = None
    mean_samples: int = 10_000
    seed: int = 0
    dense: bool | str = "auto"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not 0 < self.clamp_delta < 0.1:
            raise ValueError("clamp_delta must lie in (0, 0.1)")
        if self.pool is not None:
            self.pool = (int(self.pool[0]), int(self.pool[1]))


def invert_final_activation(x, activation, clamp_delta=1e-6):
    """Elementwise inverse of an invertible output activation, clamped to stay finite."""
    kind = activation if isinstance(activation, str) else activation.kind
    x = np.asarray(x, dtype=np.float64)
    if kind == "tanh":
        return np.arctanh(np.clip(x, -1.0 + clamp_delta, 1.0 - clamp_delta))
    if kind == "sigmoid":
        p = np.clip(x, clamp_delta, 1.0 - clamp_delta)
        return np.log(p) - np.log1p(-p)
    if kind == "identity":
        return x.copy()
    raise UnsupportedActivationError(f"cannot invert final activation {kind!r}")


def final_layer_map(gen, dense="auto"):
    """LinearMap for the bias-free last layer of ``gen`` (dense when it fits)."""
    lin = gen.final_layer.linear
    in_shape = gen.shapes[-2]
    if isinstance(lin, Dense):
        return LinearMap.from_matrix(lin.weight, in_shape, gen.output_shape)
    if dense:
        try:
            M = materialize_matrix(lin, in_shape)
            return LinearMap.from_matrix(M, in_shape, gen.output_shape)
        except SizeGuardError:
            if dense is True:
                raise
    return LinearMap.from_conv(lin, in_shape)


def inversion_target(gen, x, clamp_delta=1e-6):
    """``s_L^{-1}(x)`` minus the final-layer bias."""
    final = gen.final_layer
    o = invert_final_activation(x, final.activation, clamp_delta)
    bias = final.linear.bias
    if bias is not None:
        if isinstance(final.linear, Dense):
            o = o - bias.reshape(final.linear.out_shape)
        else:
            o = o - bias[:, None, None]
    return o


def pool_features(feat, size):
    """Non-overlapping channelwise max-pool of (C, H, W) or (N, C, H, W) features."""
    kh, kw = int(size[0]), int(size[1])
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim not in (3, 4):
        raise ShapeError(f"features must be (C, H, W) or (N, C, H, W), got {feat.shape}")
    h, w = feat.shape[-2:]
    if h % kh or w % kw:
        raise ShapeError(f"pool size {(kh, kw)} does not divide feature dims {(h, w)}")
    lead = feat.shape[:-2]
    blocks = feat.reshape(lead + (h // kh, kh, w // kw, kw))
    return blocks.max(axis=(-3, -1))


def select_channels(mean_inlier, mean_other, k):
    """Indices of the ``k`` channels whose class-mean maps differ most (mean |diff|
    over spatial positions); ties go to the lower index."""
    a = np.asarray(mean_inlier, dtype=np.float64)
    b = np.asarray(mean_other, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mean maps differ in shape: {a.shape} vs {b.shape}")
    n_ch = a.shape[0]
    if not 1 <= k <= n_ch:
        raise ValueError(f"k must be in [1, {n_ch}], got {k}")
    score = np.abs(a - b).reshape(n_ch, -1).mean(axis=1)
    return [int(i) for i in np.argsort(-score, kind="stable")[:k]]


class FlipadExtractor:
    """Reusable extractor bound to one generator; holds ``zbar``, the final-layer
    operator and its step size so they are computed once."""

    def __init__(self, gen, cfg=None, zbar=None):
        self.gen = gen
        self.cfg = cfg or FlipadConfig()
        if not gen.final_layer.activation.invertible:
            raise UnsupportedActivationError(
                f"final activation {gen.final_layer.activation.kind!r} is not invertible"
            )
        if zbar is None:
            zbar = mean_activation(gen, self.cfg.mean_samples, self.cfg.seed)
        self.zbar = np.asarray(zbar, dtype=np.float64)
        self.linear_map = final_layer_map(gen, self.cfg.dense)
        if self.zbar.shape != self.linear_map.in_shape:
            raise ShapeError(f"zbar shape {self.zbar.shape} != penultimate shape {self.linear_map.in_shape}")
        solver = self.cfg.solver
        self.step = solver.step if solver.step is not None else default_step(self.linear_map, seed=self.cfg.seed)
        self.channels = None

    def invert(self, x):
        """Raw inverted activations ``zhat`` for a batch ``(N, *out_shape)``."""
        X = np.asarray(x, dtype=np.float64)
        if X.shape[1:] != self.gen.output_shape:
            raise ShapeError(f"samples have shape {X.shape[1:]}, generator outputs {self.gen.output_shape}")
        O = inversion_target(self.gen, X, self.cfg.clamp_delta)
        out = np.empty((X.shape[0],) + self.linear_map.in_shape)
        for start in range(0, X.shape[0], CHUNK):
            sl = slice(start, start + CHUNK)
            Z, *_ = fista_batch(self.linear_map, O[sl], self.zbar, self.cfg.lam, self.cfg.solver, step=self.step)
            out[sl] = Z
        return out

    def reduce(self, zhat):
        feat = zhat
        if self.cfg.pool is not None:
            feat = pool_features(feat, self.cfg.pool)
        if self.channels is not None:
            feat = feat[:, self.channels]
        return feat

    def fit_channels(self, feat_inlier, feat_other):
        """Choose ``channel_top_k`` channels from pooled training features of both classes."""
        if self.cfg.channel_top_k is None:
            return None
        self.channels = select_channels(feat_inlier.mean(axis=0), feat_other.mean(axis=0), self.cfg.channel_top_k)
        return self.channels

    def __call__(self, x):
        X = np.asarray(x, dtype=np.float64)
        single = X.shape == self.gen.output_shape
        feats = self.reduce(self.invert(X[None] if single else X))
        return feats[0] if single else feats


def extract_features(gen, x, cfg=None, zbar=None, channels=None):
    """FLIPAD features for one sample or a batch of samples of ``gen``'s output shape."""
    ext = FlipadExtractor(gen, cfg, zbar)
    ext.channels = channels
    return ext(x)


def anchored_problem(gen, x, cfg, zbar):
    """The lasso instance solved for a single sample (handy for diagnostics)."""
    lm = final_layer_map(gen, cfg.dense)
    return LassoProblem(lm, inversion_target(gen, x, cfg.clamp_delta), zbar, cfg.lam)
