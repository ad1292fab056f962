"""Command-line entry point: ``twostage-tmle {truth,simulate,analyze,table1}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .data import TrialDataError, load_trial_csv, write_trial_csv
from .harness import (STANDARD_ESTIMATORS, STAGE2_METHODS, AnalysisError, EstimatorConfig, aggregate_metrics,
                      analyze_trial, format_table, run_replicates, trial_seed, write_replicates_csv,
                      write_summary_csv)
from .simgen import SimParams, compute_truth, generate_trial, truth_seed
from .stage1 import LIBRARIES, METHODS

logger = logging.getLogger("twostage_tmle")

PACKAGED_CONFIGS = ("default", "extended")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    sim: SimParams
    estimators: tuple[EstimatorConfig, ...]
    reps: int
    seed: int

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"sim", "estimators", "reps", "seed", "description"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        ests = d.get("estimators")
        estimators = tuple(EstimatorConfig.from_dict(e) for e in ests) if ests else STANDARD_ESTIMATORS
        return cls(SimParams.from_dict(d.get("sim")), estimators, int(d.get("reps", 1000)), int(d.get("seed", 1)))


def packaged_config_path(name: str) -> Path:
    return Path(str(resources.files("twostage_tmle") / "configs" / f"{name}.json"))


def load_run_config(spec: str | None) -> RunConfig:
    """Read a run configuration from a JSON path or a packaged config name."""
    if spec is None:
        spec = "default"
    path = Path(spec)
    if not path.exists() and spec in PACKAGED_CONFIGS:
        path = packaged_config_path(spec)
    if not path.exists():
        raise UsageError(f"config file not found: {spec}")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{spec}: invalid JSON ({exc})") from exc
    try:
        return RunConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{spec}: {exc}") from exc


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_truth(args) -> int:
    cfg = load_run_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    truth = compute_truth(cfg.sim, truth_seed(seed))
    payload = json.dumps(truth.to_dict(), indent=2)
    if args.out:
        _emit(payload, args.out)
    if not args.quiet or not args.out:
        print(f"psi_star = {truth.psi_star:.6f} (MC SE {truth.se:.6f}; "
              f"{truth.clusters_used} clusters used, {truth.clusters_dropped} dropped)")
    return 0


def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    if args.trials == 1 and args.out.endswith(".csv"):
        write_trial_csv(generate_trial(cfg.sim, trial_seed(seed, 0)), args.out)
        return 0
    os.makedirs(args.out, exist_ok=True)
    width = len(str(args.trials))
    for r in range(args.trials):
        path = os.path.join(args.out, f"trial_{r:0{width}d}.csv")
        write_trial_csv(generate_trial(cfg.sim, trial_seed(seed, r)), path)
        if not args.quiet:
            print(path)
    return 0


def cmd_analyze(args) -> int:
    data = load_trial_csv(args.data)
    config = EstimatorConfig(f"{args.stage1}/{args.stage2}", args.stage1, args.stage2, args.library,
                             args.k1, args.k2, args.adjust_l)
    est = analyze_trial(data, config, args.seed)
    payload = est.to_dict()
    payload["estimator"] = config.name
    _emit(json.dumps(payload, indent=2), args.out)
    return 0


def cmd_table1(args) -> int:
    cfg = load_run_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    reps = cfg.reps if args.reps is None else args.reps
    if reps < 1:
        raise UsageError("--reps must be at least 1")

    def progress(done, total):
        if not args.quiet and (done == total or done % max(1, total // 20) == 0):
            print(f"replicate {done}/{total}", file=sys.stderr)

    truth = compute_truth(cfg.sim, truth_seed(seed))
    results = run_replicates(cfg.sim, cfg.estimators, reps, seed, threads=args.threads, progress=progress)
    metrics = aggregate_metrics(results, truth)
    write_summary_csv(metrics, args.out)
    replicates = args.replicates or _sibling(args.out, "_replicates")
    write_replicates_csv(results, replicates)
    if not args.quiet:
        print(format_table(metrics))
    return 0


def _sibling(path: str, suffix: str) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}{suffix}{ext or '.csv'}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twostage-tmle",
                                     description="Two-Stage TMLE for cluster randomized trials.")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="run config JSON path, or a packaged name: default, extended")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--quiet", action="store_true", help="suppress progress and tables")

    p = sub.add_parser("truth", help="compute the true effect for a config")
    common(p)
    p.add_argument("--out", help="write the truth as JSON here")
    p.set_defaults(func=cmd_truth)

    p = sub.add_parser("simulate", help="write simulated trial CSVs")
    common(p)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--out", required=True, help="output .csv (one trial) or directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="estimate the effect from a trial CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--stage1", choices=METHODS, default="tmle")
    p.add_argument("--stage2", choices=STAGE2_METHODS, default="tmle-aps")
    p.add_argument("--library", choices=LIBRARIES, default="default")
    p.add_argument("--k1", type=int, default=10)
    p.add_argument("--k2", type=int, default=5)
    p.add_argument("--adjust-l", action="store_true")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("table1", help="run the simulation study and summarise every estimator")
    common(p)
    p.add_argument("--reps", type=int, help="replicates (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    p.add_argument("--out", required=True, help="summary CSV")
    p.add_argument("--replicates", help="per-replicate CSV (default: <out>_replicates.csv)")
    p.set_defaults(func=cmd_table1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (TrialDataError, AnalysisError, ValueError, OSError) as exc:
        print(f"twostage-tmle: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
