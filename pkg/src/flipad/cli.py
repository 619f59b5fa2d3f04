"""Command-line driver. Tensors are stored as TNSR files with a JSON sidecar
(``name.tnsr`` + ``name.json``); models live in directories with a manifest."""

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import suites, tnsr
from .anomaly import TrainConfig, load_model, pick_threshold, save_model, score, train
from .baselines import DctConfig, log_dct_features, raw_features
from .experiment import (
    ACTIVATION_RANGE, ExperimentConfig, _run_chunks, _summary, accuracy, add_noise_perturbation, auc,
    run_experiment, synth_samples,
)
from .final_layer import FlipadConfig, FlipadExtractor
from .generator import load_weights, save_weights, toy_generator
from .lasso import SolverConfig
from .rng import derive_seed
from .theory import write_report


def _read_config(path):
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _save_tensor(out, name, array, meta):
    out.mkdir(parents=True, exist_ok=True)
    tnsr.save(out / f"{name}.tnsr", array, np.float64)
    meta = dict(meta, shape=list(array.shape), file=f"{name}.tnsr")
    (out / f"{name}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out / f"{name}.tnsr"


def _load_tensor(path):
    path = Path(path)
    arr = tnsr.load(path).astype(np.float64)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return arr, meta


def cmd_synth_gen(a):
    gen = toy_generator(a.seed, latent_dim=a.latent_dim, out_channels=a.channels)
    path = save_weights(gen, Path(a.out) / a.name)
    print(path)


def cmd_gen_data(a):
    gen = load_weights(a.generator)
    X = synth_samples(gen, a.n, a.seed, a.source_index, a.split)
    if a.noise_sigma > 0:
        X = add_noise_perturbation(X, a.noise_sigma, derive_seed(a.seed, 17),
                                   ACTIVATION_RANGE[gen.final_layer.activation.kind])
    meta = {"generator": str(a.generator), "n": a.n, "split": a.split, "seed": a.seed,
            "source_index": a.source_index, "noise_sigma": a.noise_sigma}
    print(_save_tensor(Path(a.out), a.name, X, meta))


class _Extract:
    def __init__(self, fn, arg):
        self.fn, self.arg = fn, arg

    def __call__(self, X):
        return self.fn(X, self.arg)


def _flipad_batch(X, ext):
    z = ext.invert(X)
    return z if ext.cfg.pool is None else ext.reduce(z)


def cmd_extract(a):
    X, meta = _load_tensor(a.data)
    if a.method == "flipad":
        if a.generator is None:
            raise SystemExit("extract --method flipad needs --generator")
        cfg = FlipadConfig(lam=a.lam, solver=SolverConfig(max_iters=a.iters, rel_tol=1e-10),
                           pool=tuple(a.pool) if a.pool else None, seed=derive_seed(a.seed, 11))
        fn = _Extract(_flipad_batch, FlipadExtractor(load_weights(a.generator), cfg))
    elif a.method == "rawpad":
        fn = _Extract(raw_features, None)
    else:
        fn = _Extract(log_dct_features, DctConfig())
    F = _run_chunks(fn, X, a.workers)
    info = {"method": a.method, "data": str(a.data), "source": meta}
    if a.method == "flipad":
        info.update(lam=a.lam, iters=a.iters, generator=str(a.generator))
    print(_save_tensor(Path(a.out), a.name, F, info))


def cmd_train_detector(a):
    pos, _ = _load_tensor(a.inliers)
    negs = [_load_tensor(p)[0] for p in a.outliers]
    F = np.concatenate([pos] + negs)
    y = np.r_[np.ones(len(pos)), -np.ones(sum(len(n) for n in negs))]
    known = {f.name for f in fields(TrainConfig)}
    cfg = TrainConfig(epochs=a.epochs, seed=derive_seed(a.seed, 7),
                      **{k: v for k, v in a.train_options.items() if k in known})
    model = train(F, y, cfg)
    path = Path(a.out) / a.name
    save_model(model, path)
    print(path)


def cmd_threshold(a):
    model = load_model(a.detector)
    V, _ = _load_tensor(a.val)
    model.tau = pick_threshold(score(model, V), a.fnr)
    save_model(model, a.detector)
    print(json.dumps({"tau": model.tau, "fnr": a.fnr, "n_val": len(V)}))


def cmd_evaluate(a):
    model = load_model(a.detector)
    if model.tau is None:
        raise SystemExit("detector has no threshold; run `flipad threshold` first")
    P, _ = _load_tensor(a.inliers)
    s_in = score(model, P)
    pred_in = np.where(s_in <= model.tau, 1, -1)
    rows = [(f"in/{i}", "G", float(s), int(p)) for i, (s, p) in enumerate(zip(s_in, pred_in))]
    per = {}
    for k, path in enumerate(a.outliers):
        N, _ = _load_tensor(path)
        s_out = score(model, N)
        pred_out = np.where(s_out <= model.tau, 1, -1)
        lab = np.r_[np.ones(len(P)), -np.ones(len(N))]
        per[str(path)] = {
            "accuracy": accuracy(np.r_[pred_in, pred_out], lab),
            "auc": auc(s_in, s_out),
            "confusion": {"tp": int(np.sum(pred_in == 1)), "fn": int(np.sum(pred_in == -1)),
                          "fp": int(np.sum(pred_out == 1)), "tn": int(np.sum(pred_out == -1))},
            "score_summary": _summary(s_out),
        }
        rows += [(f"out{k}/{i}", f"G'{k}", float(s), int(p)) for i, (s, p) in enumerate(zip(s_out, pred_out))]
    rep = {"tau": model.tau, "accuracy": float(np.mean([v["accuracy"] for v in per.values()])),
           "inlier_summary": _summary(s_in), "per_opponent": per}
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(rep, indent=2, sort_keys=True))
    with open(out / "scores.csv", "w") as fh:
        fh.write("sample_id,source,split,score,prediction\n")
        for sid, src, s, p in rows:
            fh.write(f"{sid},{src},test,{s!r},{p}\n")
    print(json.dumps({"accuracy": rep["accuracy"]}))


def cmd_verify(a):
    names = list(suites.SUITES) if a.suite == "all" else [a.suite]
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    ok_all = True
    for name in names:
        passed, metrics = suites.run(name)
        write_report(out / f"verify_{name}.json", name, a.seed, metrics, passed)
        print(f"{name}: {'PASS' if passed else 'FAIL'} ({metrics['runtime_s']:.1f} s)")
        ok_all &= passed
    return 0 if ok_all else 1


def cmd_report(a):
    cfg = dict(a.experiment)
    for key in ("seed", "workers"):
        if getattr(a, key) is not None:
            cfg[key] = getattr(a, key)
    if a.method:
        cfg["method"] = a.method
    rep = run_experiment(ExperimentConfig.from_dict(cfg), a.out)
    print(json.dumps({"method": rep.method, "accuracy": rep.accuracy, "auc": rep.auc, "report": str(Path(a.out) / "report.json")}))


def _globals(parser, suppress):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=d, help="base seed (default 0)")
    parser.add_argument("--config", default=d, help="JSON file with option defaults or an experiment config")
    parser.add_argument("--out", default=d, help="output directory (default ./out)")
    parser.add_argument("--workers", type=int, default=d, help="worker processes for sample-level work (default 1)")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    _globals(common, suppress=True)
    p = argparse.ArgumentParser(prog="flipad", description="Single-model attribution of generative models.")
    _globals(p, suppress=False)
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth-gen", parents=[common], help="write a random toy generator")
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--latent-dim", type=int, default=32)
    s.add_argument("--name", default="generator")
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("gen-data", parents=[common], help="sample outputs of a generator")
    s.add_argument("--generator", required=True)
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--split", choices=["train", "val", "test"], default="train")
    s.add_argument("--source-index", type=int, default=0)
    s.add_argument("--noise-sigma", type=float, default=0.0)
    s.add_argument("--name", default="samples")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("extract", parents=[common], help="compute detector features")
    s.add_argument("--data", required=True)
    s.add_argument("--method", choices=["flipad", "rawpad", "dctpad"], default="flipad")
    s.add_argument("--generator")
    s.add_argument("--lam", type=float, default=5e-4)
    s.add_argument("--iters", type=int, default=300)
    s.add_argument("--pool", type=int, nargs=2)
    s.add_argument("--name", default="features")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train-detector", parents=[common], help="train the anomaly detector")
    s.add_argument("--inliers", required=True)
    s.add_argument("--outliers", nargs="+", required=True)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--name", default="detector")
    s.set_defaults(func=cmd_train_detector)

    s = sub.add_parser("threshold", parents=[common], help="set the threshold from validation inliers")
    s.add_argument("--detector", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--fnr", type=float, default=0.005)
    s.set_defaults(func=cmd_threshold)

    s = sub.add_parser("evaluate", parents=[common], help="accuracy and AUC on test features")
    s.add_argument("--detector", required=True)
    s.add_argument("--inliers", required=True)
    s.add_argument("--outliers", nargs="+", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("verify", parents=[common], help="run a verification suite")
    s.add_argument("--suite", choices=["all"] + list(suites.SUITES), default="all")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("report", parents=[common], help="run a full experiment from a config")
    s.add_argument("--method", choices=["flipad", "rawpad", "dctpad", "sm_f", "sm_inv"])
    s.set_defaults(func=cmd_report)
    return p, sub


def main(argv=None):
    parser, sub = build_parser()
    a = parser.parse_args(argv)
    cfg = _read_config(a.config)
    if a.verb == "report":
        a.experiment = cfg
    else:
        # config keys act as defaults for the verb's own options; explicit flags win
        sp = sub.choices[a.verb]
        dests = {act.dest for act in sp._actions}
        extra = {k: v for k, v in cfg.items() if k not in dests}
        if extra and a.verb != "train-detector":
            parser.error(f"unknown config keys for {a.verb}: {sorted(extra)}")
        sp.set_defaults(**{k: v for k, v in cfg.items() if k in dests})
        a = parser.parse_args(argv)
        a.train_options = extra
    if a.verb != "report":
        a.seed = 0 if a.seed is None else a.seed
        a.workers = 1 if a.workers is None else a.workers
    a.out = a.out or "out"
    rc = a.func(a)
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
