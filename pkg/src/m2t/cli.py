"""Command-line front end: pretrain, eval, gradcheck, ablate.

Exit codes: 0 success, 2 invalid configuration or usage, 3 training
aborted on a non-finite loss, 4 checkpoint version mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, config as config_mod
from .checkpoint import (
    CheckpointError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, TrainConfig
from .data import load_idx, synth_clusters
from .evaluate import extract_features, knn_eval, linear_probe
from .gradcheck import DEFAULT_TOL, run_all
from .trainer import MetricsRecord, NanLossError, Trainer, ablation_grid
from .seeding import substream_int

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NAN = 3
EXIT_VERSION = 4


def write_metrics_csv(records: list, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(MetricsRecord.CSV_FIELDS) + "\n")
        for rec in records:
            f.write(rec.csv_row() + "\n")


def _load_config(args) -> TrainConfig:
    if args.preset:
        doc = config_mod.preset(args.preset)
    elif args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            doc = json.load(f)
    else:
        raise ConfigError("config: either --config or --preset is required")
    if args.set:
        doc = config_mod.apply_overrides(doc, args.set)
    return config_mod.from_dict(doc)


def _write_manifest(out_dir: Path, cfg: TrainConfig, outputs: dict) -> Path:
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "code_version": __version__,
        "start_timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "end_timestamp": None,
        "outputs": outputs,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True),
                    encoding="utf-8")
    return path


def _finish_manifest(path: Path) -> None:
    manifest = json.loads(path.read_text(encoding="utf-8"))
    manifest["end_timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True),
                    encoding="utf-8")


def cmd_pretrain(args) -> int:
    try:
        cfg = _load_config(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.preset == "table1-grid":
        return _run_grid(cfg, out_dir)

    metrics_path = out_dir / "metrics.csv"
    ckpt_path = out_dir / "checkpoint.m2t"
    manifest_path = _write_manifest(out_dir, cfg, {
        "metrics": str(metrics_path), "checkpoint": str(ckpt_path)})
    try:
        result = Trainer(cfg).run()
    except NanLossError as e:
        write_metrics_csv(e.metrics + [e.diagnostic], metrics_path)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NAN
    write_metrics_csv(result.metrics, metrics_path)
    save_checkpoint(result.payload, ckpt_path)
    _finish_manifest(manifest_path)
    print(json.dumps({"logged_records": len(result.metrics),
                      "metrics": str(metrics_path),
                      "checkpoint": str(ckpt_path),
                      "health": result.health}))
    return EXIT_OK


def _run_grid(cfg: TrainConfig, out_dir: Path) -> int:
    manifest_path = _write_manifest(out_dir, cfg, {"grid": str(out_dir / "grid.json")})
    rows = ablation_grid(cfg)
    summary = []
    for row in rows:
        name = f"metrics_{row['student']}_{row['teacher']}.csv"
        write_metrics_csv(row["metrics"], out_dir / name)
        summary.append({k: row[k] for k in
                        ("student", "teacher", "accuracy",
                         "sec_per_iter_model", "wall_seconds")})
    (out_dir / "grid.json").write_text(json.dumps(summary, indent=2),
                                       encoding="utf-8")
    _finish_manifest(manifest_path)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        cfg = _load_config(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    return _run_grid(cfg, out_dir)


def _load_eval_dataset(path):
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    kind = doc.get("kind", "synthetic")
    if kind == "idx":
        return load_idx(doc["images_path"], doc.get("labels_path"))
    return synth_clusters(doc.get("num_classes", 10), doc.get("dim", 32),
                          doc.get("per_class", 500), doc.get("spread", 0.3),
                          seed=substream_int(doc.get("seed", 0), "data"))


def cmd_eval(args) -> int:
    try:
        payload = load_checkpoint(args.checkpoint)
    except CheckpointVersionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERSION
    except (CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        dataset = _load_eval_dataset(args.dataset)
    except (OSError, ValueError, KeyError) as e:
        print(f"error: dataset: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        features = extract_features(payload, dataset.samples)
        if args.mode == "probe":
            acc = linear_probe(features, dataset.labels,
                               epochs=args.probe_epochs,
                               lr=args.probe_lr, seed=args.seed)
        else:
            if args.k > len(dataset):
                print(f"error: --k {args.k} exceeds dataset size "
                      f"{len(dataset)}", file=sys.stderr)
                return EXIT_CONFIG
            rng = np.random.default_rng(args.seed)
            perm = rng.permutation(len(dataset))
            n_test = max(1, int(round(0.2 * len(dataset))))
            test, train = perm[:n_test], perm[n_test:]
            if args.k > len(train):
                print(f"error: --k {args.k} exceeds train split size "
                      f"{len(train)}", file=sys.stderr)
                return EXIT_CONFIG
            acc = knn_eval(features[train], dataset.labels[train],
                           features[test], dataset.labels[test], k=args.k)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"mode": args.mode, "accuracy": acc,
                      "checkpoint": str(args.checkpoint)}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(trials=args.trials, tol=args.tol)
    passed = results.pop("passed")
    for name in sorted(results):
        status = "ok" if np.isfinite(results[name]) and results[name] <= args.tol \
            else "FAIL"
        print(f"{name:20s} worst rel. error {results[name]:.3e}  {status}")
    print("gradcheck:", "PASS" if passed else "FAIL")
    return EXIT_OK if passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="m2t",
        description="Student-teacher self-supervised training with momentum "
                    "BN statistics, at desk scale.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=config_mod.PRESET_NAMES,
                   help="built-in config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override (repeatable, dotted paths)")
    p.add_argument("--out", default="runs/run", help="output directory")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a checkpoint's frozen features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True,
                   help="JSON dataset spec (synthetic params or idx paths)")
    p.add_argument("--mode", choices=("probe", "knn"), default="probe")
    p.add_argument("--k", type=int, default=5, help="neighbours for knn")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-epochs", type=int, default=80)
    p.add_argument("--probe-lr", type=float, default=0.5)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient gate")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the BN-combination grid")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=config_mod.PRESET_NAMES,
                   default="table1-grid")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default="runs/grid")
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
