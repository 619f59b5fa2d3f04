"""Synthetic attribution experiments: data synthesis, feature extraction, detector
training, thresholding and evaluation, plus the metrics they report."""

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .adapted import InversionConfig, build_fingerprint, fingerprint_score, inversion_score, residual
from .anomaly import TrainConfig, classify_scores, pick_threshold, score, train
from .baselines import DctConfig, log_dct_features, raw_features
from .errors import ShapeError, StageError
from .final_layer import FlipadConfig, FlipadExtractor
from .generator import forward, sample_latent, toy_generator
from .lasso import SolverConfig
from .rng import derive_seed, make_rng, standard_normal

METHODS = ("flipad", "rawpad", "dctpad", "sm_f", "sm_inv")
SPLITS = {"train": 0, "val": 1, "test": 2}
CHUNK = 256
ACTIVATION_RANGE = {"tanh": (-1.0, 1.0), "sigmoid": (0.0, 1.0), "identity": (-np.inf, np.inf)}


# --- metrics ------------------------------------------------------------------

def accuracy(predictions, labels):
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.size == 0:
        raise ShapeError(f"predictions {p.shape} and labels {y.shape} must be equal, nonempty")
    return 100.0 * np.count_nonzero(p == y) / p.size


def auc(inlier_scores, outlier_scores):
    """P(outlier score > inlier score) with ties counted one half (Mann-Whitney)."""
    a = np.asarray(inlier_scores, dtype=np.float64).ravel()
    b = np.asarray(outlier_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both classes need at least one score")
    # count via sorting: for each outlier, inliers strictly below plus half the ties
    s = np.sort(a)
    below = np.searchsorted(s, b, side="left")
    upto = np.searchsorted(s, b, side="right")
    return float(np.sum(below + 0.5 * (upto - below)) / (a.size * b.size))


def add_noise_perturbation(images, sigma, seed, value_range=(-1.0, 1.0)):
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    x = np.asarray(images, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    noisy = x + sigma * standard_normal(make_rng(seed), x.shape)
    return np.clip(noisy, *value_range)


# --- configuration and records -------------------------------------------------------

@dataclass
class ExperimentConfig:
    method: str = "flipad"
    generator_seed: int = 1
    opponent_seeds: list = field(default_factory=lambda: [2])
    out_channels: int = 1
    n_tr: int = 2000
    n_val: int = 500
    n_test: int = 500
    fnr: float = 0.005
    seed: int = 0
    # flipad
    lam: float = 5e-4
    clamp_delta: float = 1e-6
    flipad_iters: int = 300
    flipad_rel_tol: float = 1e-10
    mean_samples: int = 10_000
    pool: list | None = None
    channel_top_k: int | None = None
    # baselines
    raw_size: list | None = None
    dct_eps: float = 1e-10
    dct_crop: list | None = None
    inv_attempts: int = 10
    inv_steps: int = 1000
    inv_lr: float = 0.1
    # detector
    epochs: int = 50
    lr: float = 5e-4
    lr_milestones: list = field(default_factory=lambda: [25])
    batch_size: int = 128
    weight_decay: float = 0.5e-6
    eta: float = 1.0
    widths: list = field(default_factory=lambda: [128, 64, 32])
    # test-time perturbation
    noise_sigma: float = 0.0
    workers: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.opponent_seeds:
            raise ValueError("need at least one opponent generator")
        for k in ("n_tr", "n_val", "n_test"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs, lr=self.lr, lr_milestones=tuple(self.lr_milestones), batch_size=self.batch_size,
            weight_decay=self.weight_decay, eta=self.eta, widths=tuple(self.widths), seed=derive_seed(self.seed, 7),
        )

    def flipad_config(self):
        return FlipadConfig(
            lam=self.lam, clamp_delta=self.clamp_delta,
            solver=SolverConfig(max_iters=self.flipad_iters, rel_tol=self.flipad_rel_tol),
            pool=tuple(self.pool) if self.pool else None, channel_top_k=self.channel_top_k,
            mean_samples=self.mean_samples, seed=derive_seed(self.seed, 11),
        )


@dataclass
class DatasetManifest:
    """One record per sample: id, source (``"G"`` or ``"G'k"``), split."""

    sample_ids: list
    sources: list
    splits: list
    seed: int

    def counts(self):
        out = {}
        for s, sp in zip(self.sources, self.splits):
            out.setdefault(s, {}).setdefault(sp, 0)
            out[s][sp] += 1
        return out

    def indices(self, source=None, split=None):
        return [i for i, (s, sp) in enumerate(zip(self.sources, self.splits))
                if (source is None or s == source) and (split is None or sp == split)]

    def check(self):
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("duplicate sample ids")
        if not set(self.splits) <= set(SPLITS):
            raise ValueError(f"unknown split in {set(self.splits)}")


@dataclass
class EvalReport:
    method: str
    tau: float
    accuracy: float
    auc: float
    per_opponent: dict
    score_summary: dict
    counts: dict
    notes: list
    config: dict
    timing: dict = field(default_factory=dict)

    def to_dict(self, include_timing=True):
        d = asdict(self)
        if not include_timing:
            d.pop("timing")
        return d

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


# --- stages --------------------------------------------------------------------

def build_generators(cfg):
    """G first, then one generator per opponent seed (a repeated seed gives an identical model)."""
    gens = {"G": toy_generator(cfg.generator_seed, out_channels=cfg.out_channels)}
    for k, s in enumerate(cfg.opponent_seeds):
        gens[f"G'{k}"] = toy_generator(s, out_channels=cfg.out_channels)
    return gens


def synth_samples(gen, n, seed, source_index, split):
    """``n`` outputs of ``gen``; latents come per fixed-size chunk from derived seeds."""
    out = []
    for c, start in enumerate(range(0, n, CHUNK)):
        m = min(CHUNK, n - start)
        z = sample_latent(m, gen.latent_dim, derive_seed(seed, source_index, SPLITS[split], c))
        out.append(forward(gen, z))
    return np.concatenate(out) if out else np.zeros((0,) + gen.output_shape)


def synthesize(cfg, gens):
    """Training draws n_tr from G and n_tr split across opponents; validation uses
    G only; test draws n_test from G and from every opponent."""
    X, ids, srcs, splits = [], [], [], []
    opp = [k for k in gens if k != "G"]
    share = [cfg.n_tr // len(opp) + (1 if i < cfg.n_tr % len(opp) else 0) for i in range(len(opp))]
    plan = [("G", "train", cfg.n_tr), ("G", "val", cfg.n_val), ("G", "test", cfg.n_test)]
    plan += [(o, "train", share[i]) for i, o in enumerate(opp)]
    plan += [(o, "test", cfg.n_test) for o in opp]
    names = list(gens)
    for src, split, n in plan:
        if n == 0:
            continue
        X.append(synth_samples(gens[src], n, cfg.seed, names.index(src), split))
        ids += [f"{src}/{split}/{i}" for i in range(n)]
        srcs += [src] * n
        splits += [split] * n
    man = DatasetManifest(ids, srcs, splits, cfg.seed)
    man.check()
    return np.concatenate(X), man


def _run_chunks(fn, X, workers):
    chunks = [X[s : s + CHUNK] for s in range(0, X.shape[0], CHUNK)]
    if workers <= 1 or len(chunks) == 1:
        parts = [fn(c) for c in chunks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(fn, chunks))
    return np.concatenate(parts)


class _Raw:
    def __init__(self, size):
        self.size = size

    def __call__(self, X):
        return raw_features(X, self.size)


class _Dct:
    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, X):
        return log_dct_features(X, self.cfg)


def _scores_via_detector(cfg, extract, X, man, timing, ext=None):
    t0 = time.perf_counter()
    F = _run_chunks(extract, X, cfg.workers)
    timing["extract_s"] = time.perf_counter() - t0
    tr = man.indices(split="train")
    y = np.array([1 if man.sources[i] == "G" else -1 for i in tr])
    if ext is not None and ext.cfg.channel_top_k:
        ext.fit_channels(F[tr][y == 1], F[tr][y == -1])
        F = F[:, ext.channels]
    t0 = time.perf_counter()
    model = train(F[tr], y, cfg.train_config())
    timing["train_s"] = time.perf_counter() - t0
    return score(model, F)


class _FlipadStage:
    """Inverted (and pooled, if configured) activations of a chunk; channel
    selection happens afterwards on the training split."""

    def __init__(self, ext):
        self.ext = ext

    def __call__(self, X):
        z = self.ext.invert(X)
        return z if self.ext.cfg.pool is None else self.ext.reduce(z)


def compute_scores(cfg, gens, X, man, timing):
    """Anomaly score of every sample (higher = less like G)."""
    G = gens["G"]
    if cfg.method == "flipad":
        ext = FlipadExtractor(G, cfg.flipad_config())
        return _scores_via_detector(cfg, _FlipadStage(ext), X, man, timing, ext)
    if cfg.method == "rawpad":
        return _scores_via_detector(cfg, _Raw(tuple(cfg.raw_size) if cfg.raw_size else None), X, man, timing)
    if cfg.method == "dctpad":
        dc = DctConfig(cfg.dct_eps, tuple(cfg.dct_crop) if cfg.dct_crop else None)
        return _scores_via_detector(cfg, _Dct(dc), X, man, timing)
    if cfg.method == "sm_f":
        tr = man.indices(source="G", split="train")
        fp = build_fingerprint(X[tr])
        return _run_chunks(_FingerprintStage(fp), X, cfg.workers)
    icfg = InversionConfig(cfg.inv_attempts, cfg.inv_steps, cfg.inv_lr, seed=derive_seed(cfg.seed, 13))
    return _run_chunks(_InversionStage(G, icfg), X, cfg.workers)


class _FingerprintStage:
    def __init__(self, fp):
        self.fp = fp

    def __call__(self, X):
        return fingerprint_score(self.fp, residual(X))


class _InversionStage:
    def __init__(self, gen, icfg):
        self.gen, self.icfg = gen, icfg

    def __call__(self, X):
        return inversion_score(self.gen, X, self.icfg)


def _summary(v):
    v = np.asarray(v, dtype=np.float64)
    return {"n": int(v.size), "mean": float(v.mean()), "std": float(v.std()), "min": float(v.min()),
            "median": float(np.median(v)), "max": float(v.max())}


def run_experiment(cfg, out_dir=None):
    """Synthesize, extract, train, threshold on validation inliers, test. Returns an EvalReport."""
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    timing = {}
    t_start = time.perf_counter()

    def stage(name, fn, *a):
        try:
            return fn(*a)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, exc) from exc

    gens = stage("synth", build_generators, cfg)
    X, man = stage("synth", synthesize, cfg, gens)
    if cfg.noise_sigma > 0:
        test = man.indices(split="test")
        lo_hi = ACTIVATION_RANGE[gens["G"].final_layer.activation.kind]
        X[test] = add_noise_perturbation(X[test], cfg.noise_sigma, derive_seed(cfg.seed, 17), lo_hi)
    scores = stage("extract", compute_scores, cfg, gens, X, man, timing)

    val = man.indices(source="G", split="val")
    if any(man.splits[i] != "val" for i in val):
        raise StageError("threshold", ValueError("threshold input contains non-validation samples"))
    tau = stage("threshold", pick_threshold, scores[val], cfg.fnr)
    pred = classify_scores(scores, tau)

    test_in = man.indices(source="G", split="test")
    per_opp = {}
    for o in [k for k in gens if k != "G"]:
        test_out = man.indices(source=o, split="test")
        p = np.r_[pred[test_in], pred[test_out]]
        lab = np.r_[np.ones(len(test_in)), -np.ones(len(test_out))]
        per_opp[o] = {
            "seed": cfg.opponent_seeds[int(o[2:])],
            "accuracy": accuracy(p, lab),
            "auc": auc(scores[test_in], scores[test_out]),
            "confusion": {
                "tp": int(np.sum(pred[test_in] == 1)), "fn": int(np.sum(pred[test_in] == -1)),
                "fp": int(np.sum(pred[test_out] == 1)), "tn": int(np.sum(pred[test_out] == -1)),
            },
        }
    test_all_out = [i for i in man.indices(split="test") if man.sources[i] != "G"]
    notes = []
    if cfg.method == "sm_f":
        notes.append("fingerprint residual is a Gaussian high-pass filter, not PRNU")
    if cfg.noise_sigma > 0:
        notes.append(f"test samples perturbed with additive noise sigma={cfg.noise_sigma}")
    summary = {}
    for src in gens:
        for sp in ("train", "val", "test"):
            idx = man.indices(source=src, split=sp)
            if idx:
                summary[f"{src}/{sp}"] = _summary(scores[idx])
    timing["total_s"] = time.perf_counter() - t_start
    report = EvalReport(
        method=cfg.method, tau=tau,
        accuracy=float(np.mean([v["accuracy"] for v in per_opp.values()])),
        auc=auc(scores[test_in], scores[test_all_out]),
        per_opponent=per_opp, score_summary=summary, counts=man.counts(), notes=notes,
        config=asdict(cfg), timing=timing,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "report.json")
        write_scores_csv(out / "scores.csv", man, scores, pred)
    return report


def write_scores_csv(path, man, scores, pred):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "source", "split", "score", "prediction"])
        for i, sid in enumerate(man.sample_ids):
            w.writerow([sid, man.sources[i], man.splits[i], repr(float(scores[i])), int(pred[i])])
