"""Mean-anchored lasso and its FISTA solver.

The problem solved throughout is::

    minimize_z  ||G z - o||_2^2 + lam * ||z - zbar||_1

Substituting ``z' = z - zbar`` and ``o' = o - G zbar`` turns it into an
ordinary lasso in ``z'`` (:func:`shift_to_standard`).  The solver works on that
shifted problem internally; the prox of the anchored l1 term is a soft
threshold centred at ``zbar``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeError
from .linop import ConvSpec, conv_adjoint, conv_apply, power_iteration

logger = logging.getLogger(__name__)

STEP_SAFETY = 1.05


class _MatMul:
    # module-level callables keep LinearMap picklable for worker pools
    def __init__(self, right, shape):
        self.right, self.shape = right, tuple(shape)

    def __call__(self, v):
        n = v.shape[0]
        return (v.reshape(n, -1) @ self.right).reshape((n,) + self.shape)


class _ConvOp:
    def __init__(self, spec, adjoint_shape):
        self.spec, self.adjoint_shape = spec, adjoint_shape

    def __call__(self, v):
        if self.adjoint_shape is None:
            return conv_apply(self.spec, v)
        return conv_adjoint(self.spec, v, self.adjoint_shape)


class LinearMap:
    """Batched linear map over arrays of shape ``(N, *in_shape)``."""

    def __init__(self, apply, adjoint, in_shape, out_shape):
        self._apply = apply
        self._adjoint = adjoint
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)

    def apply(self, z):
        return self._apply(z)

    def adjoint(self, r):
        return self._adjoint(r)

    @classmethod
    def from_matrix(cls, M, in_shape=None, out_shape=None):
        M = np.asarray(M, dtype=np.float64)
        if M.ndim != 2:
            raise ShapeError(f"dense operator must be 2-D, got shape {M.shape}")
        in_shape = (M.shape[1],) if in_shape is None else tuple(in_shape)
        out_shape = (M.shape[0],) if out_shape is None else tuple(out_shape)
        if int(np.prod(in_shape)) != M.shape[1] or int(np.prod(out_shape)) != M.shape[0]:
            raise ShapeError(f"matrix {M.shape} incompatible with shapes {in_shape} -> {out_shape}")

        lm = cls(_MatMul(M.T, out_shape), _MatMul(M, in_shape), in_shape, out_shape)
        lm.matrix = M
        return lm

    @classmethod
    def from_conv(cls, spec, in_shape):
        lin = spec.without_bias()
        in_shape = tuple(in_shape)
        return cls(_ConvOp(lin, None), _ConvOp(lin, in_shape), in_shape, lin.output_shape(in_shape))

    def norm_sq(self, iters=100, seed=0):
        """Power-iteration estimate of ``lambda_max(G^T G)``."""
        return power_iteration(
            lambda v: self.apply(v[None])[0], lambda r: self.adjoint(r[None])[0], self.in_shape, iters, seed
        )


def as_linear_map(operator, in_shape=None):
    if isinstance(operator, LinearMap):
        return operator
    if isinstance(operator, ConvSpec):
        if in_shape is None:
            raise ShapeError("a convolutional operator needs an explicit input shape")
        return LinearMap.from_conv(operator, in_shape)
    return LinearMap.from_matrix(operator, in_shape)


@dataclass
class LassoProblem:
    """``||G z - o||^2 + lam * ||z - anchor||_1`` for a conv spec, dense matrix or LinearMap."""

    operator: object
    target: np.ndarray
    anchor: np.ndarray | None = None
    lam: float = 0.0
    in_shape: tuple | None = None
    linear_map: LinearMap = field(init=False, repr=False)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        in_shape = self.in_shape
        if in_shape is None and self.anchor is not None:
            in_shape = np.shape(self.anchor)
        self.linear_map = as_linear_map(self.operator, in_shape)
        self.in_shape = self.linear_map.in_shape
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.target.shape != self.linear_map.out_shape:
            raise ShapeError(
                f"target shape {self.target.shape} does not match operator output {self.linear_map.out_shape}"
            )
        if self.anchor is None:
            self.anchor = np.zeros(self.in_shape)
        else:
            self.anchor = np.asarray(self.anchor, dtype=np.float64)
            if self.anchor.shape != self.in_shape:
                raise ShapeError(f"anchor shape {self.anchor.shape} != operator input {self.in_shape}")


@dataclass
class SolverConfig:
    max_iters: int = 5000
    rel_tol: float = 1e-10
    step: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be >= 0")


@dataclass
class SolverReport:
    solution: np.ndarray
    objective_trace: list
    iterations_used: int
    residual: float
    step: float = float("nan")


def soft_threshold(v, theta):
    """``sign(v) * max(|v| - theta, 0)``, elementwise."""
    if np.any(np.asarray(theta) < 0):
        raise ValueError("theta must be nonnegative")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def objective(problem, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape != problem.in_shape:
        raise ShapeError(f"z shape {z.shape} != operator input {problem.in_shape}")
    r = problem.linear_map.apply(z[None])[0] - problem.target
    return float(np.sum(r * r) + problem.lam * np.sum(np.abs(z - problem.anchor)))


def shift_to_standard(problem):
    """Return ``(standard_problem, offset)``: zero-anchored problem with target
    ``o - G(anchor)``; add ``offset`` to its solution to solve ``problem``."""
    lm = problem.linear_map
    shifted_target = problem.target - lm.apply(problem.anchor[None])[0]
    std = LassoProblem(lm, shifted_target, np.zeros(problem.in_shape), problem.lam)
    return std, problem.anchor.copy()


def default_step(linear_map, seed=0, iters=100):
    """``1 / (1.05 * Lhat)`` where ``Lhat = 2 * lambda_max(G^T G)`` bounds the
    Lipschitz constant of the gradient of the squared residual."""
    norm_sq = linear_map.norm_sq(iters=iters, seed=seed)
    if norm_sq <= 0.0:
        return 1.0
    return 1.0 / (STEP_SAFETY * 2.0 * norm_sq)


def _objectives(residual, dev, lam):
    n = residual.shape[0]
    return np.sum(residual.reshape(n, -1) ** 2, axis=1) + lam * np.sum(np.abs(dev.reshape(n, -1)), axis=1)


def _objective_change(dG, Gx, target, u, x, lam):
    """f(u) - f(x) given ``dG = G(u - x)``.  Working from the step itself keeps the
    value accurate when both objectives agree to nearly all digits."""
    n = u.shape[0]
    dG = dG.reshape(n, -1)
    quad = np.sum(dG * (2.0 * (Gx - target).reshape(n, -1) + dG), axis=1)
    dl1 = np.sum(np.abs(u.reshape(n, -1)) - np.abs(x.reshape(n, -1)), axis=1)
    return quad + lam * dl1


def fista_batch(linear_map, targets, anchors, lam, config=None, init=None, step=None):
    """Run monotone FISTA independently on a batch of problems sharing one operator.

    ``targets`` has shape ``(N, *out_shape)``; ``anchors`` is either one anchor of
    shape ``in_shape`` or a batch ``(N, *in_shape)``.  Each problem stops on its
    own criterion.  Returns ``(solutions, traces, iterations, residual_norms, step)``.
    """
    config = config or SolverConfig()
    lm = linear_map
    O = np.asarray(targets, dtype=np.float64)
    if O.shape[1:] != lm.out_shape:
        raise ShapeError(f"targets trailing shape {O.shape[1:]} != operator output {lm.out_shape}")
    n = O.shape[0]
    zbar = np.asarray(anchors, dtype=np.float64)
    if zbar.shape == lm.in_shape:
        zbar = np.broadcast_to(zbar, (n,) + lm.in_shape)
    if zbar.shape != (n,) + lm.in_shape:
        raise ShapeError(f"anchor shape {zbar.shape} incompatible with batch of {n} and input {lm.in_shape}")
    if step is None:
        step = config.step if config.step is not None else default_step(lm, seed=config.seed)
    bshape = (n,) + (1,) * len(lm.in_shape)

    # shifted variables: d = z - zbar, residual target o' = o - G zbar
    target = O - lm.apply(np.ascontiguousarray(zbar))
    d = np.zeros((n,) + lm.in_shape) if init is None else np.asarray(init, dtype=np.float64) - zbar
    Gd = lm.apply(d)
    f = _objectives(Gd - target, d, lam)
    if not np.all(np.isfinite(f)):
        raise DivergenceError("non-finite objective at initialization")
    y, Gy = d.copy(), Gd.copy()
    t = np.ones(n)
    fresh = np.ones(n, dtype=bool)  # y coincides with the current iterate
    steps = np.full(n, float(step))
    active = np.ones(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    traces = [[float(v)] for v in f]

    for _ in range(config.max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        s = steps[idx].reshape((-1,) + bshape[1:])
        grad = 2.0 * lm.adjoint(Gy[idx] - target[idx])
        u = soft_threshold(y[idx] - s * grad, s * lam)
        # G u by linearity from the (accurately computed) image of the step
        dG = lm.apply(u - d[idx])
        Gu = Gd[idx] + dG
        fx = f[idx]
        # objective tracked incrementally: f_new = f_old + change
        change = _objective_change(dG, Gd[idx], target[idx], u, d[idx], lam)
        fu = fx + change
        if not np.all(np.isfinite(fu)):
            raise DivergenceError("non-finite objective during FISTA; step size too large?")
        rel = np.abs(change) / np.maximum(1.0, fx)
        accept = change <= 0
        iters[idx] += 1

        # accepted: momentum step
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t[idx] ** 2))
        beta = ((t[idx] - 1.0) / t_new).reshape(s.shape)
        acc = idx[accept]
        b = beta[accept]
        dx, Gdx = d[acc], Gd[acc]
        ua, Gua = u[accept], Gu[accept]
        y[acc] = ua + b * (ua - dx)
        Gy[acc] = Gua + b * (Gua - Gdx)
        d[acc], Gd[acc] = ua, Gua
        f[acc] = fu[accept]
        t[acc] = t_new[accept]
        fresh[acc] = False

        # rejected: restart momentum from the current iterate; a rejected
        # restart step means the step bound was too optimistic
        rej = idx[~accept]
        backtrack = rej[fresh[rej] & (rel[~accept] >= config.rel_tol)]
        steps[backtrack] *= 0.5
        y[rej], Gy[rej] = d[rej], Gd[rej]
        t[rej] = 1.0
        done_rej = rej[fresh[rej] & (rel[~accept] < config.rel_tol)]
        fresh[rej] = True

        for i, v in zip(idx, f[idx]):
            traces[i].append(float(v))
        done_acc = acc[rel[accept] < config.rel_tol]
        active[done_acc] = False
        active[done_rej] = False

    Z = d + zbar
    res = np.sqrt(np.sum((lm.apply(d) - target).reshape(n, -1) ** 2, axis=1))
    return Z, traces, iters, res, float(step)


def fista_solve(problem, config=None, init=None):
    """Solve ``problem`` with monotone FISTA started at the anchor (or ``init``)."""
    config = config or SolverConfig()
    init_b = None if init is None else np.asarray(init, dtype=np.float64)[None]
    Z, traces, iters, res, step = fista_batch(
        problem.linear_map, problem.target[None], problem.anchor, problem.lam, config, init_b
    )
    logger.debug("fista: %d iterations, residual %.3e", iters[0], res[0])
    return SolverReport(Z[0], traces[0], int(iters[0]), float(res[0]), step)


def ista_solve(problem, iters, step=None):
    """Plain proximal gradient, kept as a slow reference for the accelerated solver."""
    lm = problem.linear_map
    if step is None:
        step = default_step(lm)
    z = problem.anchor.copy()
    for _ in range(iters):
        grad = 2.0 * lm.adjoint(lm.apply(z[None]) - problem.target[None])[0]
        z = problem.anchor + soft_threshold(z - step * grad - problem.anchor, step * problem.lam)
    return z
