"""Open-world adaptations of fingerprint (SM-F) and gradient-inversion (SM-Inv) attribution."""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DivergenceError, ShapeError
from .generator import forward, forward_and_vjp
from .rng import make_rng, standard_normal

BLUR_SIGMA = 1.0
BLUR_RADIUS = 2


def gaussian_kernel(sigma=BLUR_SIGMA, radius=BLUR_RADIUS):
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def residual(image, sigma=BLUR_SIGMA, radius=BLUR_RADIUS):
    """High-pass residual ``x - blur(x)``; blur is a normalized Gaussian with reflect padding.

    Written as ``sum_k K_k (x - shift_k x)``, which equals ``x - K*x`` because the
    kernel sums to one, and gives exactly zero on constant regions.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError(f"image needs at least 2 dims, got {x.shape}")
    K = gaussian_kernel(sigma, radius)
    r = radius
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    xp = np.pad(x, pad, mode="reflect")
    H, W = x.shape[-2:]
    out = np.zeros_like(x)
    for i in range(2 * r + 1):
        for j in range(2 * r + 1):
            out += K[i, j] * (x - xp[..., i : i + H, j : j + W])
    return out


@dataclass
class Fingerprint:
    f: np.ndarray
    n_samples: int


def build_fingerprint(samples):
    X = np.asarray(samples, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("need at least one sample")
    return Fingerprint(residual(X).mean(axis=0), int(X.shape[0]))


def _standardize(v, what):
    v = v.reshape(v.shape[0], -1)
    sd = v.std(axis=1)
    if np.any(sd <= 1e-300) or not np.all(np.isfinite(sd)):
        raise DegenerateInputError(f"{what} has zero variance")
    return (v - v.mean(axis=1, keepdims=True)) / sd[:, None]


def fingerprint_score(fp, x):
    """``-f~ . x~`` with both standardized by mean and population std; batched on a leading axis."""
    f = fp.f if isinstance(fp, Fingerprint) else np.asarray(fp, dtype=np.float64)
    X = np.asarray(x, dtype=np.float64)
    single = X.shape == f.shape
    if single:
        X = X[None]
    if X.shape[1:] != f.shape:
        raise ShapeError(f"sample shape {X.shape[1:]} != fingerprint shape {f.shape}")
    ft = _standardize(f[None], "fingerprint")[0]
    s = -(_standardize(X, "sample") @ ft)
    return float(s[0]) if single else s


@dataclass(frozen=True)
class InversionConfig:
    attempts: int = 10
    steps: int = 1000
    lr: float = 0.1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.attempts < 1 or self.steps < 1:
            raise ValueError("attempts and steps must be >= 1")


def _one_attempt(gen, X, z0, cfg):
    N = X.shape[0]
    Z = np.broadcast_to(z0, (N,) + z0.shape).copy()
    m = np.zeros_like(Z)
    v = np.zeros_like(Z)
    alive = np.ones(N, dtype=bool)
    b1, b2 = cfg.betas
    axes = tuple(range(1, X.ndim))
    zaxes = tuple(range(1, Z.ndim))
    for t in range(1, cfg.steps + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            xh, g = forward_and_vjp(gen, Z, lambda xh: 2.0 * (xh - X))
            loss = np.sum((xh - X) ** 2, axis=axes)
        bad = ~(np.isfinite(loss) & np.all(np.isfinite(g), axis=zaxes))
        alive &= ~bad
        g[~alive] = 0.0
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        Z = Z - cfg.lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + cfg.eps)
    with np.errstate(over="ignore", invalid="ignore"):
        d = np.sqrt(np.sum((forward(gen, Z) - X) ** 2, axis=axes))
    d[~(alive & np.isfinite(d))] = np.inf
    return d


def inversion_score(gen, x, cfg=None):
    """``min_attempts (1/D) ||x - G(z_hat)||_2`` after Adam on ``||x - G(z)||^2``.

    Accepts one sample or a batch. Attempt ``i`` starts from the normal draw with
    seed ``cfg.seed + i``; non-finite attempts are dropped.
    """
    cfg = cfg or InversionConfig()
    X = np.asarray(x, dtype=np.float64)
    single = X.shape == gen.output_shape
    if single:
        X = X[None]
    if X.shape[1:] != gen.output_shape:
        raise ShapeError(f"sample shape {X.shape[1:]} != generator output {gen.output_shape}")
    D = int(np.prod(gen.output_shape))
    best = np.full(X.shape[0], np.inf)
    for a in range(cfg.attempts):
        z0 = standard_normal(make_rng(cfg.seed + a), gen.latent_shape)
        best = np.minimum(best, _one_attempt(gen, X, z0, cfg) / D)
    if not np.all(np.isfinite(best)):
        raise DivergenceError("every inversion attempt diverged for some sample")
    return float(best[0]) if single else best
