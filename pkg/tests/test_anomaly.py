import numpy as np
import pytest

from flipad.anomaly import (
    DetectorModel,
    EmbedNet,
    TrainConfig,
    classify,
    classify_scores,
    init_center,
    load_model,
    pick_threshold,
    sad_loss,
    save_model,
    score,
    train,
)


def identity_model(center, dim=2, **kw):
    return DetectorModel(EmbedNet([np.eye(dim)]), np.asarray(center, dtype=float), **kw)


def separable_set(seed, n=200):
    rng = np.random.default_rng(seed)
    inl = 0.5 * rng.standard_normal((n, 2))
    ang = rng.uniform(0, 2 * np.pi, n)
    out = 5 * np.c_[np.cos(ang), np.sin(ang)] + 0.3 * rng.standard_normal((n, 2))
    return np.r_[inl, out], np.r_[np.ones(n), -np.ones(n)]


SMALL = TrainConfig(widths=(16, 8), epochs=30, lr=5e-3, batch_size=32)


def test_center_identity_net():
    np.testing.assert_array_equal(init_center(EmbedNet([np.eye(2)]), np.array([[1.0, 1.0], [3.0, 3.0]])), [2.0, 2.0])


def test_center_single_feature_and_snapping():
    net = EmbedNet([np.eye(3)])
    c = init_center(net, np.array([[0.05, -0.02, 0.7]]))
    np.testing.assert_array_equal(c, [0.1, -0.1, 0.7])


def test_center_brute_force_mean():
    net = EmbedNet.init([5, 7, 4], seed=3)
    X = np.random.default_rng(0).standard_normal((30, 5))
    ref = sum(net(X[i : i + 1])[0] for i in range(30)) / 30
    c = init_center(net, X)
    keep = np.abs(ref) >= 0.1
    np.testing.assert_allclose(c[keep], ref[keep], atol=1e-12)
    assert np.all(np.abs(c) >= 0.1)


def test_center_empty():
    with pytest.raises(ValueError):
        init_center(EmbedNet([np.eye(2)]), np.zeros((0, 2)))


def test_loss_inlier_at_center():
    m = identity_model([1.0, 2.0])
    assert sad_loss(m, np.array([[1.0, 2.0]]), [1]) == pytest.approx(1e-6, abs=1e-18)


def test_loss_outlier_unit_distance():
    m = identity_model([0.0, 0.0], eps_sad=0.0)
    assert sad_loss(m, np.array([[1.0, 0.0]]), [-1]) == 1.0


def test_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        sad_loss(identity_model([0, 0]), np.zeros((1, 2)), [0])


def test_loss_matches_reimplementation():
    rng = np.random.default_rng(7)
    net = EmbedNet.init([4, 6, 3], seed=1, slope=0.2)
    c = rng.standard_normal(3)
    m = DetectorModel(net, c, eta=1.7, weight_decay=0.3, eps_sad=1e-3)
    X = rng.standard_normal((9, 4))
    y = np.array([1, -1, 1, 1, -1, -1, 1, -1, 1])
    ref = 0.0
    W1, W2 = net.weights
    for i in range(9):
        h = [sum(W1[k, j] * X[i, j] for j in range(4)) for k in range(6)]
        h = [v if v > 0 else 0.2 * v for v in h]
        o = [sum(W2[k, j] * h[j] for j in range(6)) for k in range(3)]
        d2 = sum((o[k] - c[k]) ** 2 for k in range(3)) + 1e-3
        ref += d2 if y[i] == 1 else 1 / d2
    ref = 1.7 * ref / 9 + 0.15 * (np.sum(W1**2) + np.sum(W2**2))
    assert sad_loss(m, X, y) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = EmbedNet.init([5, 8, 6, 3], seed=seed)
    m = DetectorModel(net, rng.standard_normal(3), eta=1.3, weight_decay=0.05)
    X = rng.standard_normal((12, 5))
    y = np.where(rng.random(12) < 0.5, 1, -1)
    _, grads = sad_loss(m, X, y, grad=True)
    h = 1e-6
    for k, W in enumerate(net.weights):
        V = rng.standard_normal(W.shape)
        W += h * V
        fp = sad_loss(m, X, y)
        W -= 2 * h * V
        fm = sad_loss(m, X, y)
        W += h * V
        fd = (fp - fm) / (2 * h)
        an = np.sum(grads[k] * V)
        assert abs(fd - an) <= 1e-4 * max(1.0, abs(an))


@pytest.mark.parametrize("seed", range(5))
def test_training_separates_and_progresses(seed):
    X, y = separable_set(seed)
    model = train(X, y, TrainConfig(widths=(16, 8), epochs=30, lr=5e-3, batch_size=32, seed=seed))
    Xt, yt = separable_set(100 + seed)
    s = score(model, Xt)
    assert s[yt == 1].mean() < s[yt == -1].mean()
    assert model.loss_history[-1] <= 1.05 * model.loss_history[0]
    assert model.tau is None and model.trained_epochs == 30


def test_single_epoch_finite_and_zero_epochs_rejected():
    X, y = separable_set(0, 20)
    model = train(X, y, TrainConfig(widths=(4, 2), epochs=1))
    assert all(np.all(np.isfinite(W)) for W in model.net.weights)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_training_needs_both_classes():
    with pytest.raises(ValueError):
        train(np.zeros((4, 2)), np.ones(4))


def test_training_deterministic():
    X, y = separable_set(1, 50)
    a = train(X, y, SMALL)
    b = train(X, y, SMALL)
    for wa, wb in zip(a.net.weights, b.net.weights):
        assert wa.tobytes() == wb.tobytes()
    assert a.center.tobytes() == b.center.tobytes()


def test_lr_schedule():
    cfg = TrainConfig()
    assert cfg.lr_at(0) == 5e-4 and cfg.lr_at(24) == 5e-4
    assert cfg.lr_at(25) == pytest.approx(5e-5)


def test_score_examples():
    m = identity_model([0.0, 0.0])
    assert score(m, np.array([3.0, 4.0])) == 5.0
    assert score(identity_model([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0
    X = np.random.default_rng(0).standard_normal((6, 2))
    batch = score(m, X)
    assert np.all(batch >= 0)
    np.testing.assert_array_equal(batch, [score(m, x) for x in X])


def test_threshold_examples():
    s = np.arange(1.0, 101.0)
    assert pick_threshold(s, 0.0) == 100.0
    tau = pick_threshold(np.random.default_rng(0).permutation(s), 0.05)
    assert tau == 95.0 and np.sum(s > tau) == 5
    with pytest.raises(ValueError):
        pick_threshold([], 0.05)


@pytest.mark.parametrize("n", [1, 7, 200, 1001])
@pytest.mark.parametrize("fnr", [0.005, 0.05, 0.3])
def test_threshold_sort_and_count(n, fnr):
    s = np.random.default_rng(n).standard_normal(n)
    tau = pick_threshold(s, fnr)
    # smallest sample value with at most floor(fnr * n) scores strictly above it
    ok = [v for v in s if np.sum(s > v) <= int(np.floor(fnr * n + 1e-12))]
    assert tau == min(ok)


def test_classify_boundary():
    m = identity_model([0.0, 0.0], tau=5.0)
    assert classify(m, np.array([3.0, 4.0])) == 1
    assert classify(m, np.array([0.0, 0.0])) == 1
    assert classify(m, np.array([6.0, 0.0])) == -1
    assert list(classify_scores([5.0, 6.0], 5.0)) == [1, -1]
    with pytest.raises(ValueError):
        classify(identity_model([0.0, 0.0]), np.zeros(2))


def test_save_load_round_trip(tmp_path):
    X, y = separable_set(2, 40)
    model = train(X, y, SMALL)
    model.tau = 1.25
    save_model(model, tmp_path / "det")
    loaded = load_model(tmp_path / "det")
    assert loaded.tau == 1.25 and loaded.trained_epochs == model.trained_epochs
    np.testing.assert_array_equal(score(loaded, X), score(model, X))
