"""Command-line front end: desk-scale experiment sweeps writing RunRecords
and plot-ready CSV grids.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import os
import sys

from .sweeps import EXPERIMENT_KINDS, ConfigError, SweepConfig, run_experiment

DATA_DIR_ENV = "NTKLAB_DATA_DIR"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ntk-lab",
        description=("Mean-field / neural-tangent-kernel experiment runner. "
                     "Defaults follow the reference protocol: variance-ratio "
                     "heatmaps sample 200 initializations per cell, training "
                     "uses full-batch gradient descent at learning rate 1e-5 "
                     "with the 1e-7/100-step early-stopping rule."))
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} sweep")
        p.add_argument("--config", help="YAML sweep configuration file")
        p.add_argument("--out-dir", help="output directory for records and CSVs")
        p.add_argument("--seed", type=int, help="master seed (default 0)")
        p.add_argument("--threads", type=int, help="worker threads across grid cells")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override any config field (YAML-parsed value); "
                            "repeatable, e.g. --set depths=[2,4,8]")
    return parser


def load_config(args) -> SweepConfig:
    cfg = SweepConfig.from_yaml(args.config) if args.config else SweepConfig()
    cfg = cfg.override(args.overrides)
    updates = {}
    if args.out_dir is not None:
        updates["out_dir"] = args.out_dir
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.threads is not None:
        updates["threads"] = args.threads
    if updates:
        cfg = cfg.override([f"{k}={v}" for k, v in updates.items()])
    cfg.experiment = args.command
    if "out_dir" not in updates and args.config is None and DATA_DIR_ENV in os.environ:
        cfg.out_dir = os.environ[DATA_DIR_ENV]
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    print(f"{cfg.experiment}: {_job_count(cfg)} grid cells -> {cfg.out_dir}")
    try:
        out = run_experiment(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime error: {err}", file=sys.stderr)
        return 2
    for path in out.csv_paths:
        print(f"wrote {path}")
    print(f"{len(out.records)} records appended")
    return 0


def _job_count(cfg: SweepConfig) -> int:
    if cfg.experiment == "phase-diagram":
        return len(cfg.sigma_w_sq) * len(cfg.sigma_b_sq)
    if cfg.experiment in ("init-variance", "lm-curves"):
        return len(cfg.sigma_w_sq) * len(cfg.depths) * len(cfg.widths)
    if cfg.experiment == "train-drift":
        return len(cfg.sigma_w_sq) * len(cfg.depths)
    if cfg.experiment == "kappa-curves":
        return len(cfg.sigma_w_sq) * len(cfg.sigma_b_sq)
    return len(cfg.sigma_w_sq) * len(cfg.depths)


if __name__ == "__main__":
    raise SystemExit(main())
