import numpy as np
import pytest

from conftest import EXAMPLE1_KERNEL, EXAMPLE1_X
from flipad.adapted import (
    Fingerprint,
    InversionConfig,
    build_fingerprint,
    fingerprint_score,
    gaussian_kernel,
    inversion_score,
    residual,
)
from flipad.errors import DegenerateInputError, DivergenceError
from flipad.generator import Activation, GeneratorSpec, Layer, forward, linear_generator, sample_latent
from flipad.linop import ConvSpec, materialize_matrix


def test_kernel_normalized_and_symmetric():
    K = gaussian_kernel()
    assert K.shape == (5, 5)
    assert K.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(K, K.T)
    assert K[2, 2] == K.max()


def test_residual_constant_is_zero():
    assert not residual(np.full((3, 9, 9), 2.5)).any()


def test_residual_impulse_matches_direct_convolution():
    img = np.zeros((11, 11))
    img[5, 5] = 1.0
    K = gaussian_kernel()
    blur = np.zeros_like(img)
    for i in range(11):
        for j in range(11):
            for a in range(-2, 3):
                for b in range(-2, 3):
                    if 0 <= i - a < 11 and 0 <= j - b < 11:
                        blur[i, j] += K[a + 2, b + 2] * img[i - a, j - b]
    np.testing.assert_allclose(residual(img), img - blur, atol=1e-15)


def test_residual_linear():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 2, 8, 8))
    np.testing.assert_allclose(residual(a + b), residual(a) + residual(b), atol=1e-13)
    np.testing.assert_allclose(residual(3 * a), 3 * residual(a), atol=1e-13)


def test_fingerprint_single_duplicate_and_mean():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((6, 1, 8, 8))
    np.testing.assert_array_equal(build_fingerprint(X[:1]).f, residual(X[0]))
    np.testing.assert_allclose(build_fingerprint(np.r_[X, X]).f, build_fingerprint(X).f, atol=1e-15)
    ref = sum(residual(x) for x in X) / 6
    fp = build_fingerprint(X)
    np.testing.assert_allclose(fp.f, ref, atol=1e-14)
    assert fp.n_samples == 6
    with pytest.raises(ValueError):
        build_fingerprint(np.zeros((0, 1, 4, 4)))


def test_fingerprint_self_scores():
    f = np.random.default_rng(2).standard_normal((2, 4, 4))
    fp = Fingerprint(f, 1)
    D = f.size
    assert fingerprint_score(fp, 2.5 * f) == pytest.approx(-D, rel=1e-12)
    assert fingerprint_score(fp, -f) == pytest.approx(D, rel=1e-12)


def test_fingerprint_score_brute_force_and_affine_invariance():
    rng = np.random.default_rng(3)
    f, x = rng.standard_normal((2, 3, 5, 5))
    fv, xv = f.ravel(), x.ravel()
    fs = (fv - fv.mean()) / np.sqrt(np.mean((fv - fv.mean()) ** 2))
    xs = (xv - xv.mean()) / np.sqrt(np.mean((xv - xv.mean()) ** 2))
    ref = -sum(a * b for a, b in zip(fs, xs))
    fp = Fingerprint(f, 1)
    assert fingerprint_score(fp, x) == pytest.approx(ref, abs=1e-10)
    assert fingerprint_score(fp, 7.0 * x - 3.0) == pytest.approx(ref, abs=1e-10)
    batch = fingerprint_score(fp, np.stack([x, 2 * x + 1]))
    np.testing.assert_allclose(batch, [ref, ref], atol=1e-10)


def test_fingerprint_zero_variance():
    fp = Fingerprint(np.random.default_rng(4).standard_normal((4, 4)), 1)
    with pytest.raises(DegenerateInputError):
        fingerprint_score(fp, np.ones((4, 4)))
    with pytest.raises(DegenerateInputError):
        fingerprint_score(Fingerprint(np.zeros((4, 4)), 1), np.eye(4))


def tiny_linear(seed, d_in=4, d_out=12):
    return linear_generator(np.random.default_rng(seed).standard_normal((d_out, d_in)))


def test_inversion_linear_generator_near_zero():
    gen = tiny_linear(0)
    x = forward(gen, sample_latent(1, 4, 5))[0]
    assert inversion_score(gen, x, InversionConfig(attempts=2, steps=1000)) < 1e-3


def test_inversion_more_attempts_never_worse():
    gen = GeneratorSpec(
        [Layer(ConvSpec(np.random.default_rng(1).standard_normal((2, 1, 3, 3)), transposed=True), Activation("tanh"))],
        (2, 3, 3),
    )
    X = np.tanh(np.random.default_rng(2).standard_normal((4,) + gen.output_shape))
    one = inversion_score(gen, X, InversionConfig(attempts=1, steps=100))
    ten = inversion_score(gen, X, InversionConfig(attempts=10, steps=100))
    assert np.all(ten <= one)


def test_inversion_bounded_by_projection_residual():
    spec = ConvSpec(EXAMPLE1_KERNEL.reshape(1, 1, 2, 2), transposed=True)
    gen = GeneratorSpec([Layer(spec, Activation("identity"))], (1, 2, 2))
    x_bad = EXAMPLE1_X.copy()[None]
    x_bad[0, 1, 1] += 1.0
    M = materialize_matrix(spec, (1, 2, 2))
    coef, *_ = np.linalg.lstsq(M, x_bad.ravel(), rcond=None)
    floor = np.linalg.norm(M @ coef - x_bad.ravel()) / 9
    assert floor > 0.01
    s = inversion_score(gen, x_bad, InversionConfig(attempts=3, steps=300))
    assert s >= floor * (1 - 1e-9)


def test_inversion_batch_matches_single():
    gen = tiny_linear(3)
    X = forward(gen, sample_latent(3, 4, 1)) + 0.1
    cfg = InversionConfig(attempts=2, steps=50)
    batch = inversion_score(gen, X, cfg)
    for i in range(3):
        assert inversion_score(gen, X[i], cfg) == pytest.approx(batch[i], rel=1e-12)


def test_inversion_all_attempts_diverge():
    gen = tiny_linear(0)
    x = np.full(gen.output_shape, 1e300)
    with pytest.raises(DivergenceError):
        inversion_score(gen, x, InversionConfig(attempts=2, steps=5))


def test_inversion_config_validation():
    with pytest.raises(ValueError):
        InversionConfig(attempts=0)
