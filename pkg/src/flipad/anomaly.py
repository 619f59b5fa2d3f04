"""DeepSAD-style hypersphere detector with a small dense embedding net.

Training uses manual backprop and a hand-written Adam so the whole model stays
in numpy and is bit-reproducible for a given seed.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tnsr
from .errors import DivergenceError, ShapeError
from .rng import make_rng, standard_normal

CENTER_MIN = 0.1


class EmbedNet:
    """Bias-free dense net: leaky-relu hidden layers, linear output layer.

    ``weights[l]`` has shape (out, in). Omitting biases is the usual DeepSAD
    guard against the trivial constant embedding.
    """

    def __init__(self, weights, slope=0.01):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.slope = float(slope)
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"embedding layer {i} expects {self.weights[i].shape[1]} inputs, gets {self.weights[i - 1].shape[0]}")

    @classmethod
    def init(cls, widths, seed=0, slope=0.01):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or widths[-1] < 2:
            raise ValueError("need an input width and an output width >= 2")
        rng = make_rng(seed)
        ws = [standard_normal(rng, (o, i)) * math.sqrt(2.0 / i) for i, o in zip(widths[:-1], widths[1:])]
        return cls(ws, slope)

    @property
    def widths(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def _act(self, a):
        return np.where(a > 0, a, self.slope * a)

    def forward(self, X, keep=False):
        h = np.asarray(X, dtype=np.float64)
        cache = [h]
        last = len(self.weights) - 1
        for i, W in enumerate(self.weights):
            a = h @ W.T
            h = a if i == last else self._act(a)
            if keep:
                cache.append(a)
        return (h, cache) if keep else h

    __call__ = forward

    def backward(self, cache, g_out):
        """Gradients w.r.t. each weight, given d(loss)/d(output)."""
        grads = [None] * len(self.weights)
        g = g_out
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            a = cache[i + 1]
            if i != last:
                g = g * np.where(a > 0, 1.0, self.slope)
            inp = cache[0] if i == 0 else self._act(cache[i])
            grads[i] = g.T @ inp
            g = g @ self.weights[i]
        return grads


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 5e-4
    lr_milestones: tuple = (25,)
    lr_gamma: float = 0.1
    batch_size: int = 128
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.5e-6
    eta: float = 1.0
    eps_sad: float = 1e-6
    widths: tuple = (128, 64, 32)
    slope: float = 0.01
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, epoch):
        return self.lr * self.lr_gamma ** sum(epoch >= m for m in self.lr_milestones)


@dataclass
class DetectorModel:
    net: EmbedNet
    center: np.ndarray
    tau: float | None = None
    eta: float = 1.0
    weight_decay: float = 0.0
    eps_sad: float = 1e-6
    trained_epochs: int = 0
    feat_mean: np.ndarray | None = None
    feat_scale: np.ndarray | None = None
    feature_shape: tuple | None = None
    loss_history: list = field(default_factory=list)

    def _flat(self, features):
        X = np.asarray(features, dtype=np.float64)
        if self.feature_shape is not None and X.shape == tuple(self.feature_shape):
            X = X[None]
        X = X.reshape(X.shape[0], -1)
        if X.shape[1] != self.net.widths[0]:
            raise ShapeError(f"features have {X.shape[1]} entries, detector expects {self.net.widths[0]}")
        if self.feat_mean is not None:
            X = (X - self.feat_mean) / self.feat_scale
        return X

    def embed(self, features):
        return self.net(self._flat(features))


def init_center(net, inlier_features, min_abs=CENTER_MIN):
    X = np.asarray(inlier_features, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("need at least one inlier feature")
    c = net(X.reshape(X.shape[0], -1)).mean(axis=0)
    small = np.abs(c) < min_abs
    c[small] = np.where(c[small] < 0, -min_abs, min_abs)
    return c


def _check_labels(y):
    y = np.asarray(y)
    if not np.all((y == 1) | (y == -1)):
        raise ValueError("labels must be +1 or -1")
    return y.astype(np.float64)


def sad_loss(model, features, labels, grad=False):
    """(eta/m) * sum (d^2 + eps)^y + (wd/2) * sum ||W||_F^2; optionally with weight gradients."""
    y = _check_labels(labels)
    X = model._flat(features)
    m = X.shape[0]
    out, cache = model.net.forward(X, keep=True)
    diff = out - model.center
    d2 = np.sum(diff**2, axis=1) + model.eps_sad
    w = model.eta / m
    loss = w * np.sum(d2**y) + 0.5 * model.weight_decay * sum(np.sum(W**2) for W in model.net.weights)
    if not grad:
        return loss
    dd2 = w * y * d2 ** (y - 1)
    grads = model.net.backward(cache, 2.0 * dd2[:, None] * diff)
    grads = [g + model.weight_decay * W for g, W in zip(grads, model.net.weights)]
    return loss, grads


def train(features, labels, cfg=None):
    cfg = cfg or TrainConfig()
    y = _check_labels(labels)
    X = np.asarray(features, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise ShapeError(f"{X.shape[0]} features but {y.shape[0]} labels")
    if not (np.any(y == 1) and np.any(y == -1)):
        raise ValueError("training needs both inliers and outliers")
    feature_shape = X.shape[1:]
    flat = X.reshape(X.shape[0], -1)

    if cfg.standardize:
        mean = flat.mean(axis=0)
        scale = flat.std(axis=0)
        scale[scale < 1e-12] = 1.0
    else:
        mean, scale = np.zeros(flat.shape[1]), np.ones(flat.shape[1])

    rng = make_rng(cfg.seed)
    net = EmbedNet.init([flat.shape[1], *cfg.widths], rng, cfg.slope)
    model = DetectorModel(
        net, np.zeros(cfg.widths[-1]), None, cfg.eta, cfg.weight_decay, cfg.eps_sad, 0, mean, scale, feature_shape
    )
    Z = model._flat(flat)
    model.center = init_center(net, Z[y == 1])
    model.feat_mean, model.feat_scale = None, None  # Z is already standardized during training

    b1, b2 = cfg.betas
    m1 = [np.zeros_like(W) for W in net.weights]
    m2 = [np.zeros_like(W) for W in net.weights]
    t = 0
    n = Z.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = sad_loss(model, Z[idx], y[idx], grad=True)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            total += loss * len(idx)
            t += 1
            for k, g in enumerate(grads):
                m1[k] = b1 * m1[k] + (1 - b1) * g
                m2[k] = b2 * m2[k] + (1 - b2) * g * g
                mh = m1[k] / (1 - b1**t)
                vh = m2[k] / (1 - b2**t)
                net.weights[k] -= lr * mh / (np.sqrt(vh) + cfg.adam_eps)
        model.loss_history.append(total / n)
        model.trained_epochs += 1
    model.feat_mean, model.feat_scale = mean, scale
    return model


def score(model, features):
    """Distance to the center; a single feature gives a scalar, a batch an array."""
    X = np.asarray(features, dtype=np.float64)
    single = model.feature_shape is not None and X.shape == tuple(model.feature_shape)
    if model.feature_shape is None and X.ndim == 1:
        single = True
    d = np.linalg.norm(model.embed(X[None] if single else X) - model.center, axis=1)
    return float(d[0]) if single else d


def pick_threshold(val_scores, fnr):
    s = np.sort(np.asarray(val_scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValueError("need at least one validation score")
    if not 0 <= fnr < 1:
        raise ValueError("fnr must lie in [0, 1)")
    k = math.ceil((1.0 - fnr) * s.size) - 1
    return float(s[max(k, 0)])


def classify_scores(scores, tau):
    if tau is None:
        raise ValueError("threshold not set")
    return np.where(np.asarray(scores) <= tau, 1, -1)


def classify(model, features):
    out = classify_scores(score(model, features), model.tau)
    return int(out) if np.ndim(out) == 0 else out


def save_model(model, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = []
    for i, W in enumerate(model.net.weights):
        name = f"w{i}.tnsr"
        tnsr.save(path / name, W, np.float64)
        files.append(name)
    tnsr.save(path / "center.tnsr", model.center, np.float64)
    extra = {}
    if model.feat_mean is not None:
        tnsr.save(path / "feat_mean.tnsr", model.feat_mean, np.float64)
        tnsr.save(path / "feat_scale.tnsr", model.feat_scale, np.float64)
        extra = {"feat_mean": "feat_mean.tnsr", "feat_scale": "feat_scale.tnsr"}
    manifest = {
        "format": "flipad-detector",
        "version": 1,
        "widths": model.net.widths,
        "slope": model.net.slope,
        "weights": files,
        "center": "center.tnsr",
        "tau": model.tau,
        "eta": model.eta,
        "weight_decay": model.weight_decay,
        "eps_sad": model.eps_sad,
        "trained_epochs": model.trained_epochs,
        "feature_shape": list(model.feature_shape) if model.feature_shape is not None else None,
        "loss_history": model.loss_history,
        **extra,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_model(path):
    path = Path(path)
    man = json.loads((path / "manifest.json").read_text())
    if man.get("format") != "flipad-detector":
        raise ValueError(f"{path} is not a detector directory")
    net = EmbedNet([tnsr.load(path / f) for f in man["weights"]], man["slope"])
    mean = tnsr.load(path / man["feat_mean"]) if "feat_mean" in man else None
    scale = tnsr.load(path / man["feat_scale"]) if "feat_scale" in man else None
    fs = tuple(man["feature_shape"]) if man["feature_shape"] is not None else None
    return DetectorModel(
        net, tnsr.load(path / man["center"]), man["tau"], man["eta"], man["weight_decay"], man["eps_sad"],
        man["trained_epochs"], mean, scale, fs, list(man["loss_history"]),
    )
