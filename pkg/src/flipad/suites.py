"""Named verification suites. Each returns ``(passed, metrics)`` with raw numbers
so callers can re-check tolerances against the metrics themselves."""

import time

import numpy as np

from .final_layer import FlipadConfig, extract_features
from .generator import Activation, GeneratorSpec, Layer
from .lasso import LassoProblem, SolverConfig, fista_solve, objective
from .linop import ConvSpec, conv_adjoint, conv_apply, materialize_matrix
from .rng import make_rng, standard_normal
from . import theory

EXAMPLE1_KERNEL = np.array([[0.0, 1.0], [2.0, 3.0]])
EXAMPLE1_Z = np.array([[0.0, 1.0], [2.0, 3.0]])
EXAMPLE1_X = np.array([[0.0, 0.0, 1.0], [0.0, 4.0, 6.0], [4.0, 12.0, 9.0]])
TIGHT = SolverConfig(max_iters=5000, rel_tol=0.0)


def example1():
    spec = ConvSpec(EXAMPLE1_KERNEL.reshape(1, 1, 2, 2), transposed=True)
    x = conv_apply(spec, EXAMPLE1_Z[None])[0]
    gen = GeneratorSpec([Layer(spec, Activation("identity"))], (1, 2, 2))
    zhat = extract_features(gen, x[None, None], FlipadConfig(lam=1e-8, solver=TIGHT), zbar=np.zeros((1, 2, 2)))[0, 0]
    exact = bool(np.array_equal(x, EXAMPLE1_X))
    err = float(np.max(np.abs(zhat - EXAMPLE1_Z)))
    return exact and err < 1e-5, {"output_exact": exact, "linf_error": err}


def example2(n_mc=10_000_000, seed=0):
    a = theory.example2_logprob([2.0, 0.5], [1.0, 1.0], 0.1)
    b = theory.example2_logprob([1.0, 1.0], [1.0, 1.0], 0.1)
    mc = theory.example2_monte_carlo([2.0, 0.5], [1.0, 1.0], 0.1, n=n_mc, seed=seed)
    ok = abs(a + 7.16) <= 0.01 and abs(b + 6.06) <= 0.01 and mc["within_3sigma"]
    return ok, {"logprob_G": a, "logprob_G_prime": b, "monte_carlo": mc}


def example3(d=8):
    Gp = np.eye(d)
    Gp[:, 0] = 1.0
    z = fista_solve(LassoProblem(Gp, np.ones(d), None, 1e-6)).solution
    err = float(np.linalg.norm(z - np.eye(d)[0]))
    return err < 1e-4, {"l2_error": err}


def dense_ista(G, o, zbar, lam, iters):
    """Reference proximal gradient, prox centred at the anchor."""
    s = 1.0 / (2.0 * np.linalg.norm(G, 2) ** 2)
    GtG, Gto = G.T @ G, G.T @ o
    z = zbar.copy()
    for _ in range(iters):
        v = z - 2.0 * s * (GtG @ z - Gto) - zbar
        z = zbar + np.sign(v) * np.maximum(np.abs(v) - s * lam, 0.0)
    return z


def certificate_violation(G, o, zbar, lam, z):
    g = 2.0 * G.T @ (G @ z - o)
    dev = z - zbar
    at = dev == 0
    v1 = np.max(np.abs(g[at]) - lam, initial=0.0)
    v2 = np.max(np.abs(g[~at] + lam * np.sign(dev[~at])), initial=0.0)
    return float(max(v1, v2))


def solver(n_problems=20, seed=0):
    gaps, certs = [], []
    rng = np.random.default_rng(seed)
    for _ in range(n_problems):
        G = rng.standard_normal((6, 10))
        o = rng.standard_normal(6)
        zbar = 0.5 * rng.standard_normal(10)
        lam = 0.05 + 0.4 * rng.random()
        p = LassoProblem(G, o, zbar, lam)
        z = fista_solve(p).solution
        ref = dense_ista(G, o, zbar, lam, 10 * SolverConfig().max_iters)
        gaps.append(objective(p, z) - objective(p, ref))
        certs.append(certificate_violation(G, o, zbar, lam, fista_solve(p, TIGHT).solution))
    ok = max(gaps) < 1e-8 and max(certs) <= 1e-6
    return ok, {"max_objective_gap": float(max(gaps)), "max_certificate_violation": float(max(certs))}


def _random_spec(rng):
    transposed = bool(rng.integers(2))
    cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    k = int(rng.integers(1, 4))
    shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
    spec = ConvSpec(
        rng.standard_normal(shape), stride=int(rng.integers(1, 3)), padding=int(rng.integers(0, 2)),
        dilation=int(rng.integers(1, 3)), transposed=transposed,
    )
    return spec, (cin, int(rng.integers(4, 8)), int(rng.integers(4, 8)))


def adjoint(n_cases=50, seed=0):
    rng = np.random.default_rng(seed)
    rel, mat = [], []
    done = 0
    while done < n_cases:
        spec, in_shape = _random_spec(rng)
        try:
            out_shape = spec.output_shape(in_shape)
        except Exception:  # noqa: BLE001 - invalid geometry, redraw
            continue
        x = rng.standard_normal(in_shape)
        y = rng.standard_normal(out_shape)
        lhs = np.vdot(conv_apply(spec, x), y)
        rhs = np.vdot(x, conv_adjoint(spec, y, in_shape))
        rel.append(abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
        M = materialize_matrix(spec, in_shape)
        mat.append(float(np.max(np.abs(M @ x.ravel() - conv_apply(spec, x).ravel()))))
        done += 1
    ok = max(rel) < 1e-10 and max(mat) < 1e-12
    return ok, {"max_adjoint_rel": float(max(rel)), "max_materialize_abs": float(max(mat)), "cases": n_cases}


UNIQUENESS_FAMILY = theory.ConvFamily(in_shape=(1, 8, 8), out_channels=1, kernel=3, stride=2, padding=1, transposed=False)


def uniqueness(n_problems=10, n_inits=10, lam=1e-3, seed=0):
    dists = []
    for p in range(n_problems):
        rng = make_rng(seed * 1000 + p)
        _, lm = UNIQUENESS_FAMILY.draw_map(rng)
        o = lm.apply(np.abs(standard_normal(rng, (1,) + lm.in_shape)))[0]
        dists.append(theory.uniqueness_probe(lm, o, lam, n_inits, seed=seed * 1000 + p))
    return max(dists) < 1e-4, {"max_pairwise_linf": float(max(dists)), "per_problem": dists}


RECOVERY_FAMILY = theory.ConvFamily()


def recovery(trials=20, seed=0):
    noiseless = [theory.recovery_experiment(RECOVERY_FAMILY, 1, 0.0, 1e-8, seed * 1000 + s).error for s in range(5)]
    means = {}
    for E in (0.1, 0.5):
        means[E] = float(np.mean([theory.recovery_experiment(RECOVERY_FAMILY, 2, E, 1e-3, seed * 1000 + s).error for s in range(trials)]))
    c1 = theory.calibrate_c1(RECOVERY_FAMILY, 2, [0.1, 0.5], 1e-3, range(seed * 1000 + 500, seed * 1000 + 506))
    fresh = [theory.recovery_experiment(RECOVERY_FAMILY, 2, E, 1e-3, seed * 1000 + 700 + s, c1=c1).passed
             for E in (0.2, 0.4) for s in range(5)]
    ok = max(noiseless) < 1e-4 and means[0.1] <= means[0.5] and all(fresh)
    return ok, {"max_noiseless_error": float(max(noiseless)), "mean_error": means, "c1": c1, "fresh_bound_pass": fresh}


def rip(seeds=range(5)):
    vals = []
    for s in seeds:
        _, lm = theory.RIP_FAMILY.draw_map(make_rng(s))
        reps = {r.S: r for r in theory.rip_profile(lm, [1, 2, 4, 8], theory.RIP_TRIALS, seed=s)}
        vals.append(reps[theory.RIP_S].delta_hat)
    return max(vals) < theory.RIP_THRESHOLD, {"delta_hat": vals, "threshold": theory.RIP_THRESHOLD}


def shift(seed=0):
    spec = UNIQUENESS_FAMILY.draw(make_rng(seed))
    rng = np.random.default_rng(seed)
    o1, o2 = rng.standard_normal((2, 1, 4, 4))
    rep = theory.solution_space_shift_check(spec, o1, o2, (1, 8, 8))
    full = theory.solution_space_dim(262144, 12288)
    ok = rep.passed and rep.dim == 48 and full == 249856
    return ok, {"toy": rep, "full_scale_dim": full}


SUITES = {
    "example1": example1,
    "example2": example2,
    "example3": example3,
    "solver": solver,
    "adjoint": adjoint,
    "uniqueness": uniqueness,
    "recovery": recovery,
    "rip": rip,
    "shift": shift,
}


def run(name):
    t0 = time.perf_counter()
    passed, metrics = SUITES[name]()
    metrics = dict(metrics, runtime_s=time.perf_counter() - t0)
    return passed, metrics
