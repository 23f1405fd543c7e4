"""Command-line entry point: ``fedafa <subcommand> [--config FILE] [--seed N] ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, ExperimentConfig
from .data import PartitionSpec, load_dataset, partition_indices, save_dataset, train_test_split
from .experiment import (SWEEP_PARAMS, build_benchmark, compute_metrics, personalize_client, run_experiment,
                         save_run, sweep, write_csv, write_final_csv, write_manifest, write_per_class_csv,
                         write_sweep_csv)
from .federation import stream
from .model import load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_CORRUPT = 5

EPILOG = """\
exit codes:
  0  success
  1  runtime failure during compute
  2  usage error (unknown flag, bad argument)
  3  malformed or invalid config / parameter values
  4  missing input file
  5  corrupt input file (bad magic, truncated, out-of-range labels)
"""


class InputMissing(Exception):
    pass


class InputCorrupt(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="config file (flat key=value with sections); default: built-in desk-scale defaults")
    p.add_argument("--seed", type=int, help="overrides the config seed and FEDAFA_SEED")
    p.add_argument("--out-dir", type=Path, default=Path("runs"), help="artifact directory (default: runs)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--workers", type=int, help="thread pool size for per-client work")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedafa", description=__doc__, epilog=EPILOG,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the long-tailed training pool and the balanced global test set",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)

    p = sub.add_parser("partition", help="Dirichlet-partition a dataset file into client files + manifest",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    p.add_argument("--data", type=Path, help="dataset file (default: OUT_DIR/train_pool.fdst)")

    p = sub.add_parser("train", help="federated training + personalization with the configured method",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)

    p = sub.add_parser("personalize", help="personalize every client from a saved global checkpoint",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, help="global model (default: OUT_DIR/models/global.fafa)")
    p.add_argument("--method", choices=cfgmod.METHODS)

    p = sub.add_parser("sweep", help="rerun the experiment over values of one hyperparameter",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    p.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", help="comma-separated seeds (default: the run seed)")

    p = sub.add_parser("report", help="collect sweep outputs / compare two runs into tidy CSV",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    p.add_argument("inputs", nargs="*", type=Path, help="sweep.csv files or directories containing one")
    p.add_argument("--baseline", type=Path, help="run directory of the baseline method")
    p.add_argument("--compare", type=Path, help="run directory of the method to compare")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        if not args.config.exists():
            raise InputMissing(f"config file not found: {args.config}")
        cfg = cfgmod.load(args.config, args.seed)
    else:
        cfg = cfgmod.apply_seed(cfgmod.DESK_DEFAULTS, args.seed)
    changes = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        changes[key.strip()] = cfgmod.coerce(key.strip(), value)
    if args.workers is not None:
        changes["workers"] = args.workers
    if changes:
        cfg = cfg.replace(**changes)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _load_dataset(path: Path):
    if not path.exists():
        raise InputMissing(f"input file not found: {path}")
    try:
        return load_dataset(path)
    except ValueError as exc:
        raise InputCorrupt(str(exc)) from None


def cmd_gen_data(cfg: ExperimentConfig, args) -> None:
    bench = build_benchmark(cfg)
    from .data import concat
    pool = concat([c.train for c in bench.clients] + [c.test for c in bench.clients])
    order = np.argsort(pool.labels, kind="stable")
    save_dataset(pool.subset(order), args.out_dir / "train_pool.fdst")
    save_dataset(bench.global_test, args.out_dir / "test_global.fdst")
    write_manifest(args.out_dir / "data_manifest.json", cfg,
                   train_class_counts=pool.class_counts().tolist(),
                   test_class_counts=bench.global_test.class_counts().tolist())


def cmd_partition(cfg: ExperimentConfig, args) -> None:
    data = _load_dataset(args.data or args.out_dir / "train_pool.fdst")
    spec = PartitionSpec(cfg.num_clients, cfg.alpha, cfg.imbalance_factor, cfg.seed)
    manifest = []
    for k, idx in enumerate(partition_indices(data.labels, data.num_classes, spec)):
        shard = data.subset(idx)
        train, test = train_test_split(shard, cfg.test_fraction, stream(cfg.seed, 103, k))
        save_dataset(train, args.out_dir / f"client_{k:03d}_train.fdst")
        save_dataset(test, args.out_dir / f"client_{k:03d}_test.fdst")
        manifest.append({"client_id": k, "n_k": len(shard), "class_counts": shard.class_counts().tolist(),
                         "seed": cfg.seed, "alpha": cfg.alpha, "imbalance_factor": cfg.imbalance_factor})
    (args.out_dir / "partition.json").write_text(json.dumps(manifest, indent=2) + "\n")


def cmd_train(cfg: ExperimentConfig, args) -> None:
    bench = build_benchmark(cfg)
    result = run_experiment(cfg, bench)
    save_run(args.out_dir, result, bench)
    print(f"{cfg.method}: mean personalized accuracy {result.metrics.mean_acc:.2f}% "
          f"({cfg.eval_on} test view) over {len(bench.clients)} clients")


def cmd_personalize(cfg: ExperimentConfig, args) -> None:
    if args.method:
        cfg = cfg.replace(method=args.method)
    ckpt = args.checkpoint or args.out_dir / "models" / "global.fafa"
    if not ckpt.exists():
        raise InputMissing(f"checkpoint not found: {ckpt}")
    try:
        global_model = load_checkpoint(ckpt).with_boundary(cfg.boundary_index)
    except ValueError as exc:
        raise InputCorrupt(str(exc)) from None
    if global_model.layer_sizes != cfg.layer_sizes:
        raise ConfigError(f"checkpoint layer sizes {global_model.layer_sizes} do not match config {cfg.layer_sizes}")
    bench = build_benchmark(cfg)
    models = {c.client_id: personalize_client(cfg, c, global_model)[0] for c in bench.clients}
    metrics = compute_metrics(models, bench.clients, bench.global_test, cfg.eval_on)
    out = args.out_dir / cfg.method
    (out / "models").mkdir(parents=True, exist_ok=True)
    write_final_csv(out / "final.csv", metrics)
    write_csv(out / "per_class.csv", ["class_id", "global_count", "acc"],
              [(c, int(n), float(a)) for c, (n, a) in enumerate(zip(bench.global_counts, metrics.per_class_acc))])
    for k, m in sorted(models.items()):
        save_checkpoint(m, out / "models" / f"client_{k:03d}.fafa")
    write_manifest(out / "manifest.json", cfg, method=cfg.method, checkpoint=str(ckpt),
                   mean_acc=round(metrics.mean_acc, 4))
    print(f"{cfg.method}: mean personalized accuracy {metrics.mean_acc:.2f}%")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_sweep(cfg: ExperimentConfig, args) -> None:
    seeds = [int(s) for s in _floats(args.seeds)] if args.seeds else [cfg.seed]
    rows = sweep(cfg, args.param, _floats(args.values), seeds)
    write_sweep_csv(args.out_dir / "sweep.csv", rows)
    write_manifest(args.out_dir / "manifest.json", cfg, param=args.param, seeds=seeds,
                   values=[r.value for r in rows])
    for r in rows:
        print(f"{r.param}={r.value}: {r.mean_acc:.2f} +- {r.std_acc:.2f}")


def _read_rows(path: Path) -> list[dict]:
    if not path.exists():
        raise InputMissing(f"input not found: {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(cfg: ExperimentConfig, args) -> None:
    if not args.inputs and not (args.baseline and args.compare):
        raise ConfigError("report needs sweep inputs or both --baseline and --compare")
    if args.inputs:
        rows = []
        for p in args.inputs:
            for r in _read_rows(p / "sweep.csv" if p.is_dir() else p):
                rows.append((r["param"], r["value"], r["mean_acc"], r["std_acc"]))
        write_csv(args.out_dir / "report.csv", ["param", "value", "mean_acc", "std_acc"], rows)
    if args.baseline and args.compare:
        base = _read_rows(args.baseline / "per_class.csv")
        comp = _read_rows(args.compare / "per_class.csv")
        write_per_class_csv(args.out_dir / "per_class_delta.csv", [int(r["global_count"]) for r in base],
                            [float(r["acc"]) for r in base], [float(r["acc"]) for r in comp])


COMMANDS = {"gen-data": cmd_gen_data, "partition": cmd_partition, "train": cmd_train,
            "personalize": cmd_personalize, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"fedafa: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputMissing as exc:
        print(f"fedafa: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InputCorrupt as exc:
        print(f"fedafa: corrupt input: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic contract
        print(f"fedafa: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
