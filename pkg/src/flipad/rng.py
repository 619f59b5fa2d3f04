"""Portable seeded random streams.

All randomness in the package comes from numpy's ``Philox`` bit generator (a
counter-based generator whose output is specified independently of platform).
Normal variates are produced with the Box-Muller transform applied to the
``random()`` stream rather than numpy's ziggurat sampler, so the mapping from
seed to samples is fixed by this module alone.
"""

import numpy as np


def make_rng(seed):
    """Return a ``numpy.random.Generator`` backed by Philox seeded with ``seed``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(seed, *keys):
    """Deterministically derive a child seed from ``seed`` and integer keys."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def standard_normal(rng, shape):
    """Standard normal samples via Box-Muller on the uniform stream of ``rng``."""
    rng = make_rng(rng)
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    n = int(np.prod(shape, dtype=np.int64))
    half = (n + 1) // 2
    u1 = rng.random(half)
    u2 = rng.random(half)
    # random() is in [0, 1); 1 - u1 is in (0, 1] so the log is finite
    r = np.sqrt(-2.0 * np.log1p(-u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * half)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n].reshape(shape)


def truncated_normal(rng, shape, scale=1.0, bound=4.0):
    """Normal samples with standard deviation ``scale`` redrawn until within ``bound`` sigmas."""
    rng = make_rng(rng)
    out = standard_normal(rng, shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = standard_normal(rng, int(bad.sum()))
        bad = np.abs(out) > bound
    return scale * out
