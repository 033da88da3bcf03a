"""Command-line front end: ``rknet generate | train | eval | plot | pipeline``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``RKN_THREADS`` caps the
number of worker threads used by ``eval`` (1 gives bitwise-reproducible output).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .evaluate import compare, metrics_report, read_metrics_csv, write_metrics_csv
from .kalman import FilterRun, MeasurementNoiseModel, run_kf
from .linalg import NumericalError
from .rkn import CheckpointError, file_hash, load_checkpoint, rkn_filter, save_checkpoint
from .ssm import (DatasetFormatError, generate_dataset, load_dataset, make_cv_model,
                  default_initial_law, save_dataset)
from .train import TrainConfig, TrainingDiverged, train_rkn, write_history_csv

log = logging.getLogger("rknet")

# arguments of the current invocation, recorded in every provenance header
_ARGV: list[str] = []

SCENARIO_GROUPS = {
    "s1": (("S1", 1.0),),
    "s2": (("S2a", 0.5), ("S2b", 0.5)),
    "s3": (("S3a", 0.5), ("S3b", 0.5)),
    "s2a": (("S2a", 1.0),), "s2b": (("S2b", 1.0),),
    "s3a": (("S3a", 1.0),), "s3b": (("S3b", 1.0),),
}
MODEL_TAGS = {"s1": "rkn_ref", "s2": "rkn_e1", "s3": "rkn_e2"}


class UsageError(Exception):
    pass


def _threads() -> int:
    raw = os.environ.get("RKN_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RKN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("RKN_THREADS must be >= 1")
    return n


def _provenance(extra: dict | None = None) -> dict:
    prov = {"tool": f"rknet {__version__}", "command": " ".join(["rknet", *_ARGV])}
    prov.update(extra or {})
    return prov


def scenario_mix(group: str, count: int) -> list[tuple[str, int]]:
    key = group.lower()
    if key not in SCENARIO_GROUPS:
        raise UsageError(f"unknown scenario {group!r}; valid ids: {', '.join(SCENARIO_GROUPS)}")
    parts = SCENARIO_GROUPS[key]
    counts = [int(round(count * w)) for _, w in parts]
    counts[-1] = count - sum(counts[:-1])
    return [(sid, c) for (sid, _), c in zip(parts, counts)]


# -- generate --------------------------------------------------------------

def cmd_generate(args) -> list[Path]:
    if args.length < 1:
        raise UsageError("--length must be >= 1")
    if min(args.train, args.val, args.test) < 0:
        raise UsageError("episode counts must be non-negative")
    model = make_cv_model(args.dt, args.sigma_v)
    initial = default_initial_law()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for split, count in (("train", args.train), ("val", args.val), ("test", args.test)):
        if count == 0:
            continue
        mix = scenario_mix(args.scenario, count)
        ds = generate_dataset(model, mix, initial, args.length, args.seed, split)
        ds.provenance = _provenance({"seed": args.seed})
        path = out / f"{args.scenario.lower()}_{split}.jsonl"
        save_dataset(ds, path)
        written.append(path)
        print(f"{path}: {len(ds)} episodes, T={args.length}, scenario={args.scenario}, "
              f"seed={args.seed}")
    if not written:
        raise UsageError("all episode counts are zero")
    return written


# -- train -----------------------------------------------------------------

def _load(path: str):
    if not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    return load_dataset(path)


def _infer_tag(ds) -> str:
    ids = {sid for sid, c in ds.scenario_mix if c > 0}
    if ids == {"S1"}:
        return "rkn_ref"
    if ids <= {"S2a", "S2b"}:
        return "rkn_e1"
    if ids <= {"S3a", "S3b"}:
        return "rkn_e2"
    return "rkn"


def cmd_train(args) -> Path:
    train_set, val_set = _load(args.train), _load(args.val)
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"config not found: {args.config}")
        config = TrainConfig.from_json(args.config)
    else:
        config = TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.max_epochs is not None:
        config.max_epochs = args.max_epochs
    tag = args.tag or _infer_tag(train_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, history = train_rkn(config, config.seed, train_set, val_set)
    data_hashes = {"train_sha256": file_hash(args.train), "val_sha256": file_hash(args.val)}
    prov = _provenance({"seed": config.seed, "tag": tag, **data_hashes})
    ckpt = out / f"{tag}_seed{config.seed}.json"
    digest = save_checkpoint(model, ckpt, {
        "tag": tag, "config": config.__dict__, "best_epoch": history.best_epoch,
        "stop_epoch": history.stop_epoch, "events": history.events, "provenance": prov})
    write_history_csv(history, out / f"{tag}_seed{config.seed}_history.csv",
                      {**prov, "checkpoint_sha256": digest})
    stop = history.stop_epoch if history.stop_epoch is not None else "none (max epochs)"
    print(f"{ckpt}: best epoch {history.best_epoch}, early stop {stop}, sha256 {digest[:12]}")
    return ckpt


# -- eval ------------------------------------------------------------------

def parse_estimator(spec: str):
    spec = spec.strip()
    if spec == "kf:oracle":
        return ("kf", MeasurementNoiseModel("oracle"))
    if spec.startswith("kf:fixed="):
        try:
            r = float(spec.split("=", 1)[1])
            return ("kf", MeasurementNoiseModel("fixed", r))
        except ValueError:
            raise UsageError(f"invalid fixed variance in {spec!r}") from None
    if spec.startswith("rkn:"):
        path = spec[4:]
        if not Path(path).exists():
            raise UsageError(f"checkpoint not found: {path}")
        return ("rkn", path)
    raise UsageError(f"unknown estimator {spec!r}; expected kf:oracle | kf:fixed=<r> | rkn:<path>")


def _rkn_name(path: str, model) -> str:
    tag = getattr(model, "metadata", {}).get("tag")
    return f"rkn:{tag or Path(path).stem}:{file_hash(path)[:12]}"


def _chunked_run(fn, episodes, workers: int) -> FilterRun:
    if workers <= 1 or len(episodes) < 2 * workers:
        return fn(episodes)
    chunks = np.array_split(np.arange(len(episodes)), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        runs = list(pool.map(lambda idx: fn([episodes[i] for i in idx]), chunks))
    first = runs[0]
    cat = {k: np.concatenate([getattr(r, k) for r in runs])
           for k in ("x_pred", "x_post", "P_post", "K", "y")}
    opt = {k: (np.concatenate([getattr(r, k) for r in runs])
               if getattr(first, k) is not None else None) for k in ("P_pred", "S")}
    ids = [i for r in runs for i in r.episode_ids]
    return FilterRun(**cat, **opt, estimator_id=first.estimator_id, episode_ids=ids)


def evaluate_estimators(test_set, specs: list[str], workers: int = 1):
    parsed = [(s, parse_estimator(s)) for s in specs]
    reports, hashes = [], {}
    for spec, (kind, obj) in parsed:
        if kind == "kf":
            run = _chunked_run(lambda eps: run_kf(test_set.model, obj, test_set.initial, eps),
                               test_set.episodes, workers)
            name = obj.estimator_id
        else:
            model = load_checkpoint(obj)
            name = _rkn_name(obj, model)
            hashes[name] = file_hash(obj)
            run = _chunked_run(lambda eps: rkn_filter(model, test_set.initial, eps,
                                                      estimator_id=name),
                               test_set.episodes, workers)
        reports.append(metrics_report(run, test_set, name))
    return reports, hashes


def cmd_eval(args):
    specs = [s for s in args.estimators.split(",") if s.strip()]
    if not specs:
        raise UsageError("no estimators given")
    for s in specs:
        parse_estimator(s)
    try:
        probes = tuple(int(p) for p in args.probes.split(","))
    except ValueError:
        raise UsageError(f"invalid probe list {args.probes!r}") from None
    test_set = _load(args.test)
    if any(not 0 <= p < test_set.T for p in probes):
        raise UsageError(f"probe times must lie in [0, {test_set.T})")
    reports, hashes = evaluate_estimators(test_set, specs, _threads())
    prov = _provenance({"test_seed": test_set.master_seed, "test_sha256": file_hash(args.test),
                        **{f"checkpoint {k}": v for k, v in hashes.items()}})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(reports, out / "metrics.csv", prov)
    table = compare(reports, probes)
    table.write_csv(out / "comparison.csv", prov)
    text = table.render()
    (out / "comparison.txt").write_text(
        "".join(f"# {k}: {v}\n" for k, v in prov.items()) + text + "\n", encoding="utf-8")
    print(text)
    return table


# -- plot ------------------------------------------------------------------

def cmd_plot(args) -> list[Path]:
    if not Path(args.metrics).exists():
        raise UsageError(f"metrics file not found: {args.metrics}")
    data = read_metrics_csv(args.metrics)
    if args.estimators:
        wanted = [s.strip() for s in args.estimators.split(",")]
        data = {k: v for k, v in data.items() if any(k == w or k.startswith(w) for w in wanted)}
        if not data:
            raise ValueError("none of the requested estimators are in the metrics file")
    from .plots import plot_gains, plot_std
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [plot_std(data, out / "fig_std_position.svg"),
             plot_gains(data, out / "fig_gain_position.svg")]
    for p in paths:
        print(p)
    return paths


# -- pipeline --------------------------------------------------------------

def cmd_pipeline(args) -> None:
    """generate -> train (one model per training scenario and seed) -> eval -> plot."""
    if not Path(args.config).exists():
        raise UsageError(f"config not found: {args.config}")
    cfg = json.loads(Path(args.config).read_text())
    out = Path(cfg.get("out", "pipeline_out"))
    T = int(cfg.get("length", 150))
    data_dir, ckpt_dir, res_dir = out / "data", out / "checkpoints", out / "results"
    test_args = argparse.Namespace(scenario="s1", train=0, val=0, test=int(cfg.get("test", 1000)),
                                   length=T, seed=int(cfg.get("test_seed", 42)), out=str(data_dir),
                                   dt=1.0, sigma_v=0.01)
    cmd_generate(test_args)
    train_cfg = out / "train_config.json"
    out.mkdir(parents=True, exist_ok=True)
    TrainConfig(**cfg.get("train_config", {})).to_json(train_cfg)
    ckpts = []
    for i, group in enumerate(cfg.get("scenarios", ["s1", "s2", "s3"])):
        gen = argparse.Namespace(scenario=group, train=int(cfg.get("train", 1000)),
                                 val=int(cfg.get("val", 100)), test=0, length=T,
                                 seed=int(cfg.get("data_seed", 7)) + i, out=str(data_dir),
                                 dt=1.0, sigma_v=0.01)
        cmd_generate(gen)
        for seed in cfg.get("seeds", [0]):
            targs = argparse.Namespace(train=str(data_dir / f"{group}_train.jsonl"),
                                       val=str(data_dir / f"{group}_val.jsonl"),
                                       config=str(train_cfg), seed=int(seed), max_epochs=None,
                                       tag=MODEL_TAGS.get(group), out=str(ckpt_dir))
            ckpts.append(cmd_train(targs))
    specs = ["kf:oracle", "kf:fixed=1"] + [f"rkn:{p}" for p in ckpts]
    probes = ",".join(str(p) for p in cfg.get("probes", [70, 80]))
    cmd_eval(argparse.Namespace(test=str(data_dir / "s1_test.jsonl"), estimators=",".join(specs),
                                probes=probes, out=str(res_dir)))
    cmd_plot(argparse.Namespace(metrics=str(res_dir / "metrics.csv"), estimators=None,
                                out=str(res_dir)))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rknet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"rknet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate train/val/test datasets")
    g.add_argument("--scenario", required=True, help=f"one of {', '.join(SCENARIO_GROUPS)}")
    g.add_argument("--train", type=int, default=1000)
    g.add_argument("--val", type=int, default=100)
    g.add_argument("--test", type=int, default=0)
    g.add_argument("--length", type=int, default=150)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--dt", type=float, default=1.0)
    g.add_argument("--sigma-v", dest="sigma_v", type=float, default=0.01)
    g.add_argument("--out", default=".")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a Recursive KalmanNet")
    t.add_argument("--train", required=True)
    t.add_argument("--val", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", dest="max_epochs", type=int)
    t.add_argument("--tag", help="model name (default inferred: rkn_ref, rkn_e1, rkn_e2)")
    t.add_argument("--out", default=".")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate estimators on a test set")
    e.add_argument("--test", required=True)
    e.add_argument("--estimators", required=True,
                   help="comma-separated: kf:oracle, kf:fixed=<r>, rkn:<checkpoint>")
    e.add_argument("--probes", default="70,80")
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="SVG figures from a metrics CSV")
    pl.add_argument("--metrics", required=True)
    pl.add_argument("--estimators", help="comma-separated estimator ids or prefixes")
    pl.add_argument("--out", default=".")
    pl.set_defaults(func=cmd_plot)

    pp = sub.add_parser("pipeline", help="run generate, train, eval and plot from a JSON config")
    pp.add_argument("config")
    pp.set_defaults(func=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    global _ARGV
    argv = list(sys.argv[1:] if argv is None else argv)
    _ARGV = argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rknet: error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, TrainingDiverged) as exc:
        print(f"rknet: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (OSError, DatasetFormatError, CheckpointError, ValueError) as exc:
        print(f"rknet: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
