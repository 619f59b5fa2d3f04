import numpy as np
import pytest

from conftest import EXAMPLE1_KERNEL, EXAMPLE1_X, EXAMPLE1_Z
from flipad.errors import ShapeError, UnsupportedActivationError
from flipad.final_layer import (
    FlipadConfig,
    FlipadExtractor,
    extract_features,
    final_layer_map,
    inversion_target,
    invert_final_activation,
    pool_features,
    select_channels,
)
from flipad.generator import Activation, GeneratorSpec, Layer, forward, hidden_activation, sample_latent, toy_generator
from flipad.lasso import SolverConfig
from flipad.linop import ConvSpec, conv_apply, materialize_matrix

FAST = SolverConfig(max_iters=300)
TIGHT = SolverConfig(max_iters=5000, rel_tol=0.0)


def example1_generator():
    spec = ConvSpec(EXAMPLE1_KERNEL.reshape(1, 1, 2, 2), transposed=True)
    return GeneratorSpec([Layer(spec, Activation("identity"))], (1, 2, 2))


def test_tanh_round_trip():
    assert invert_final_activation(np.tanh(0.5), Activation("tanh")) == pytest.approx(0.5, abs=1e-12)


def test_tanh_clamp_at_one():
    delta = 1e-6
    out = invert_final_activation(1.0, "tanh", delta)
    assert np.isfinite(out)
    assert out == pytest.approx(0.5 * np.log((2 - delta) / delta), rel=1e-9)
    assert out == pytest.approx(7.254, abs=1e-3)


def test_sigmoid_round_trip_and_identity():
    v = np.linspace(-4, 4, 9)
    s = 1 / (1 + np.exp(-v))
    np.testing.assert_allclose(invert_final_activation(s, "sigmoid"), v, atol=1e-9)
    np.testing.assert_array_equal(invert_final_activation(v, "identity"), v)


@pytest.mark.parametrize("kind", ["relu", "leaky_relu"])
def test_non_invertible_rejected(kind):
    with pytest.raises(UnsupportedActivationError):
        invert_final_activation(np.ones(3), kind)


def test_example1_recovers_input():
    gen = example1_generator()
    x = forward(gen, EXAMPLE1_Z.reshape(1, 1, 2, 2))
    np.testing.assert_array_equal(x[0, 0], EXAMPLE1_X)
    cfg = FlipadConfig(lam=1e-8, solver=TIGHT)
    zhat = extract_features(gen, x, cfg, zbar=np.zeros((1, 2, 2)))
    M = materialize_matrix(gen.final_layer.linear, (1, 2, 2))
    assert np.linalg.norm(M @ zhat.ravel() - EXAMPLE1_X.ravel()) < 1e-6
    assert np.max(np.abs(zhat[0, 0] - EXAMPLE1_Z)) < 1e-5


def test_output_at_anchor_returns_anchor():
    gen = toy_generator(1)
    rng = np.random.default_rng(0)
    zbar = np.abs(rng.standard_normal(gen.shapes[-2]))
    final = gen.final_layer
    x = final.activation(conv_apply(final.linear, zbar))
    for lam in (1e-4, 5e-4, 1e-2):
        zhat = extract_features(gen, x, FlipadConfig(lam=lam, solver=FAST), zbar=zbar)
        np.testing.assert_array_equal(zhat, zbar)


@pytest.mark.parametrize("eps", [0.5, 0.1, -0.02])
def test_impossible_output_leaves_residual(eps):
    gen = example1_generator()
    x_bad = EXAMPLE1_X.copy()[None, None]
    x_bad[0, 0, 1, 1] += eps
    M = materialize_matrix(gen.final_layer.linear, (1, 2, 2))
    # distance of the perturbation direction from the range of M (dense least squares)
    e = np.zeros(9)
    e[4] = 1.0
    coef, *_ = np.linalg.lstsq(M, e, rcond=None)
    c = np.linalg.norm(e - M @ coef)
    assert c > 0.1
    zhat = extract_features(gen, x_bad, FlipadConfig(lam=1e-8, solver=TIGHT), zbar=np.zeros((1, 2, 2)))
    resid = np.linalg.norm(M @ zhat.ravel() - x_bad.ravel())
    assert resid >= c * abs(eps) * (1 - 1e-6)


def test_self_consistency_against_true_activation():
    gen = toy_generator(2)
    cfg = FlipadConfig(solver=FAST, mean_samples=2000)
    ext = FlipadExtractor(gen, cfg)
    z = sample_latent(20, 32, 3)
    h_true = hidden_activation(gen, z)
    x = forward(gen, z)
    zhat = ext.invert(x)
    O = inversion_target(gen, x)
    lm = ext.linear_map
    for i in range(20):
        r_hat = lm.apply(zhat[i : i + 1])[0] - O[i]
        r_true = lm.apply(h_true[i : i + 1])[0] - O[i]
        f_hat = np.sum(r_hat**2) + cfg.lam * np.abs(zhat[i] - ext.zbar).sum()
        f_true = np.sum(r_true**2) + cfg.lam * np.abs(h_true[i] - ext.zbar).sum()
        assert f_hat <= f_true


def test_extraction_is_deterministic():
    gen = toy_generator(3)
    cfg = FlipadConfig(solver=FAST, mean_samples=500, pool=(2, 2))
    x = forward(gen, sample_latent(5, 32, 1))
    a = extract_features(gen, x, cfg)
    b = extract_features(gen, x, cfg)
    assert a.shape == (5, 8, 4, 4)
    assert a.tobytes() == b.tobytes()


def test_dense_and_matrix_free_agree():
    gen = toy_generator(4)
    x = forward(gen, sample_latent(3, 32, 2))
    zbar = np.full(gen.shapes[-2], 0.3)
    a = extract_features(gen, x, FlipadConfig(solver=FAST, dense=True), zbar=zbar)
    b = extract_features(gen, x, FlipadConfig(solver=FAST, dense=False), zbar=zbar)
    np.testing.assert_allclose(a, b, atol=1e-8)
    assert hasattr(final_layer_map(gen, True), "matrix")


def test_wrong_sample_shape():
    gen = toy_generator(0)
    ext = FlipadExtractor(gen, FlipadConfig(solver=FAST, mean_samples=10))
    with pytest.raises(ShapeError):
        ext.invert(np.zeros((2, 1, 8, 8)))


def test_relu_output_generator_rejected():
    gen = GeneratorSpec([Layer(ConvSpec(np.ones((1, 1, 2, 2)), transposed=True), Activation("relu"))], (1, 2, 2))
    with pytest.raises(UnsupportedActivationError):
        FlipadExtractor(gen, FlipadConfig(mean_samples=10))


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_other_generator_needs_larger_departure(seed):
    G = toy_generator(100 + seed)
    G2 = toy_generator(200 + seed)
    ext = FlipadExtractor(G, FlipadConfig(lam=5e-4, solver=FAST, mean_samples=5000, seed=seed))
    own = ext.invert(forward(G, sample_latent(200, 32, 10 + seed)))
    other = ext.invert(forward(G2, sample_latent(200, 32, 20 + seed)))
    d_own = np.abs(own - ext.zbar).reshape(200, -1).sum(axis=1).mean()
    d_other = np.abs(other - ext.zbar).reshape(200, -1).sum(axis=1).mean()
    assert d_other > d_own


def test_pool_constant_and_block():
    np.testing.assert_array_equal(pool_features(np.full((2, 4, 6), 3.0), (2, 3)), np.full((2, 2, 2), 3.0))
    assert pool_features(np.array([[[1.0, 2.0], [3.0, 4.0]]]), (2, 2)).item() == 4.0


def test_pool_matches_brute_force():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((3, 3, 8, 6))
    out = pool_features(f, (2, 3))
    ref = np.empty((3, 3, 4, 2))
    for n in range(3):
        for c in range(3):
            for i in range(4):
                for j in range(2):
                    ref[n, c, i, j] = max(f[n, c, 2 * i + a, 3 * j + b] for a in range(2) for b in range(3))
    np.testing.assert_array_equal(out, ref)


def test_pool_divisibility():
    with pytest.raises(ShapeError):
        pool_features(np.zeros((1, 5, 4)), (2, 2))


def test_select_channels_ties_and_single_difference():
    m = np.zeros((5, 2, 2))
    assert select_channels(m, m, 3) == [0, 1, 2]
    other = m.copy()
    other[3] += 1.0
    assert select_channels(m, other, 2) == [3, 0]


def test_select_channels_brute_force():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 10, 3, 3))
    scores = [np.mean(np.abs(a[c] - b[c])) for c in range(10)]
    ref = sorted(range(10), key=lambda c: (-scores[c], c))[:4]
    assert select_channels(a, b, 4) == ref


def test_select_channels_range():
    with pytest.raises(ValueError):
        select_channels(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)), 4)
    with pytest.raises(ValueError):
        select_channels(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)), 0)


def test_config_validation():
    with pytest.raises(ValueError):
        FlipadConfig(lam=0.0)
    with pytest.raises(ValueError):
        FlipadConfig(clamp_delta=0.2)
