"""Command-line entry point: ``estimate``, ``plan``, ``run`` and ``sweep``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .errors import FedSketchError
from .experiment import (
    EstimationResult,
    ExperimentConfig,
    Strategy,
    build_scenario,
    choose_plan,
    emit_report,
    estimate,
    run_experiment,
)

SWEEP_STRATEGIES = (
    "optimized/optimized-k",
    "full/full-rank",
    "fixed(0.2)/full-rank",
    "uniform/full-rank",
    "weighted/full-rank",
    "fixed(0.2)/normal-rank",
    "fixed(0.2)/uniform-rank",
)
SWEEP_COLUMNS = ("strategy", "wall_clock_to_target_s", "setup_time_s", "rounds", "final_loss",
                 "final_accuracy")


def _config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "strategy", None):
        changes["strategy"] = args.strategy
    return config.replace(**changes) if changes else config


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_estimate(args) -> int:
    config = _config(args)
    result = estimate(build_scenario(config), config)
    path = Path(args.out_dir) / "constants.json"
    _write_json(path, result.to_dict())
    print(path)
    return 0


def cmd_plan(args) -> int:
    config = _config(args)
    scenario = build_scenario(config)
    strategy = config.parsed_strategy
    constants = None
    if strategy.needs_constants:
        if args.constants:
            constants = EstimationResult.from_dict(json.loads(Path(args.constants).read_text())).constants
        else:
            constants = estimate(scenario, config).constants
    plan = choose_plan(strategy, scenario, config, constants)
    path = Path(args.out_dir) / "plan.json"
    _write_json(path, plan.to_dict())
    print(path)
    return 0


def cmd_run(args) -> int:
    config = _config(args)
    report = run_experiment(config)
    formats = [args.format] if args.format else ["csv", "json"]
    for path in emit_report(report, args.out_dir, formats):
        print(path)
    if report.wall_clock_to_target is None:
        print(f"target not reached within {len(report.records)} rounds", file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    config = _config(args)
    scenario = build_scenario(config)
    strategies = args.strategies or list(SWEEP_STRATEGIES)
    estimation = None
    rows = []
    for name in strategies:
        run_config = config.replace(strategy=name)
        if Strategy.parse(name).needs_constants and estimation is None:
            estimation = estimate(scenario, run_config)
        report = run_experiment(run_config, scenario, estimation=estimation)
        last = report.records[-1] if report.records else None
        rows.append({
            "strategy": name,
            "wall_clock_to_target_s": report.wall_clock_to_target,
            "setup_time_s": report.setup_time,
            "rounds": len(report.records),
            "final_loss": last.global_loss if last else None,
            "final_accuracy": last.eval_metrics.get("accuracy") if last else None,
        })
        if args.per_strategy:
            slug = name.replace("/", "__").replace("(", "_").replace(")", "").replace(",", "_")
            emit_report(report, Path(args.out_dir) / slug, [args.format] if args.format else ["csv", "json"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "json":
        path = out / "sweep.json"
        _write_json(path, {"rows": rows})
    else:
        path = out / "sweep.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, SWEEP_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    for row in rows:
        t = row["wall_clock_to_target_s"]
        print(f"{row['strategy']:28s} {'unreached' if t is None else f'{t:12.1f} s'}")
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsketch",
        description="Federated LoRA with client sampling and rank sketching: experiments.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log probe progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, strategy=True):
        p.add_argument("--config", help="YAML or JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config's master seed")
        p.add_argument("--out-dir", default=".", help="directory for output files")
        if strategy:
            p.add_argument("--strategy", help="sampling/rank strategy, e.g. fixed(0.2)/full-rank")
        p.add_argument("--format", choices=("csv", "json"), help="output format")

    p = sub.add_parser("estimate", help="probe runs -> constants.json")
    common(p, strategy=False)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("plan", help="constants + profiles -> plan.json")
    common(p)
    p.add_argument("--constants", help="constants.json from `estimate` (otherwise probes run)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="full experiment -> rounds.csv / summary.json")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="optimized plan vs baselines -> comparison table")
    common(p, strategy=False)
    p.add_argument("--strategies", nargs="+", help="strategies to compare (default: all)")
    p.add_argument("--per-strategy", action="store_true", help="also write each run's report")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FedSketchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
