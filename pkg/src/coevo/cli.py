"""Command-line entry point: ``coevo run | optimize | experiment | validate | analyze``.

Exit codes: 0 success, 2 invalid config, 3 runtime contract violation,
130 interrupted (the log ends with a truncation marker).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from coevo import scenarios
from coevo.config import ConfigError, RunConfig, load_config, parse_config
from coevo.core import ContractViolation
from coevo.detectors import analyze_log
from coevo.engine import EnumerationLimitError, SeedPlan, iterate
from coevo.simulation import csv_projection, initial_population, read_log

EXIT_OK, EXIT_CONFIG, EXIT_CONTRACT, EXIT_INTERRUPTED = 0, 2, 3, 130


def _common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("--config", required=config_required, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="run directory to write")
    p.add_argument("--replicates", type=int, help="replicate count for sampled harvests")
    p.add_argument("--quiet", action="store_true", help="print nothing on success")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coevo", description="Society/environment co-evolution harness")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("run", help="simulate a config"), config_required=True)
    _common(sub.add_parser("optimize", help="inner or outer policy search"), config_required=True)
    p = sub.add_parser("experiment", help="run a shipped scenario preset")
    p.add_argument("scenario_name", nargs="?", help=f"one of {', '.join(scenarios.PRESETS)}")
    p.add_argument("--scenario", help="same as the positional scenario name")
    _common(p)
    _common(sub.add_parser("validate", help="check a config against every invariant"), config_required=True)
    p = sub.add_parser("analyze", help="run detectors on a run directory")
    p.add_argument("run_dir")
    p.add_argument("--quiet", action="store_true")
    return parser


def _overrides(raw: dict, args) -> dict:
    raw = dict(raw)
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "replicates", None) is not None:
        raw["harvest"] = {**raw.get("harvest", {}), "replicates": args.replicates}
    return raw


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    return parse_config(_overrides(cfg.raw, args))


def _out(args, label: str, seed: int) -> Path:
    return Path(args.out) if args.out else Path("runs") / f"{label}-seed{seed}"


def _report_config_error(exc: ConfigError) -> int:
    print(f"error: {exc}", file=sys.stderr)
    if exc.report is not None:
        print(str(exc.report), file=sys.stderr)
    return EXIT_CONFIG


def cmd_validate(args) -> int:
    cfg = _load(args)
    # dry run: one iteration exercises every rule on the initial population
    if cfg.environment is not None and cfg.raw.get("scenario") != "phase":
        seeds = SeedPlan(cfg.seed)
        pop = initial_population(cfg.society, cfg.environment, cfg.init, cfg.harvest, seeds, cfg.objective.limit)
        iterate(cfg.society, cfg.environment, pop, seeds=seeds, limit=cfg.objective.limit)
    if not args.quiet:
        print("ok")
    return EXIT_OK


def cmd_analyze(args) -> int:
    run_dir = Path(args.run_dir)
    log_path = run_dir / "log.jsonl"
    if not log_path.exists():
        print(f"error: no log.jsonl in {run_dir}", file=sys.stderr)
        return EXIT_CONFIG
    records = read_log(log_path)
    det = {}
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        try:
            det = load_config(cfg_path).detectors
        except ConfigError:
            det = {}
    iters = [r for r in records if r.get("kind") == "iteration"]
    report = analyze_log(iters, **det)
    (run_dir / "detectors.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    (run_dir / "summary.csv").write_text(csv_projection(iters))
    if not args.quiet:
        print(json.dumps({"escape": report.escape, "runaway": report.runaway}, sort_keys=True))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            return cmd_validate(args)
        if args.command == "analyze":
            return cmd_analyze(args)
        if args.command == "run":
            cfg = _load(args)
            scenarios.simulate(cfg, _out(args, Path(args.config).stem, cfg.seed), quiet=args.quiet)
        elif args.command == "optimize":
            cfg = _load(args)
            scenarios.optimize(cfg, _out(args, "optimize-" + Path(args.config).stem, cfg.seed), quiet=args.quiet)
        elif args.command == "experiment":
            name = args.scenario or args.scenario_name
            if not name:
                print("error: experiment needs a scenario name", file=sys.stderr)
                return EXIT_CONFIG
            if name not in scenarios.PRESETS:
                print(f"error: unknown scenario {name!r}; choose from {', '.join(scenarios.PRESETS)}", file=sys.stderr)
                return EXIT_CONFIG
            raw = load_config(args.config).raw if args.config else scenarios.preset_raw(name)
            cfg = parse_config(_overrides(raw, args))
            scenarios.run_scenario(name, cfg, _out(args, name, cfg.seed), quiet=args.quiet)
        return EXIT_OK
    except ConfigError as exc:
        return _report_config_error(exc)
    except (ContractViolation, EnumerationLimitError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except scenarios.RunInterrupted:
        print("interrupted; partial log written", file=sys.stderr)
        return EXIT_INTERRUPTED
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_INTERRUPTED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
