"""Shipped experiment presets and the run-directory writers shared with the CLI."""

from __future__ import annotations

import copy
import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from coevo.config import RunConfig, parse_config
from coevo.detectors import DetectorReport, analyze_log, crossing_point, er_point
from coevo.engine import SeedPlan
from coevo.harvest import kelly_growth_rate
from coevo.optimize import (
    EncodingSpace,
    inner_optimize,
    outer_adversarial,
    outer_random,
    responsiveness,
)
from coevo.simulation import csv_projection, dumps, run_simulation

PRESETS = ("malthus", "runaway", "phase", "kelly", "adversarial")


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("coevo.presets").iterdir() if p.name.endswith(".json"))


def preset_raw(name: str) -> dict:
    path = resources.files("coevo.presets").joinpath(f"{name}.json")
    if not path.is_file():
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return json.loads(path.read_text())


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("COEVO_THREADS", "1")))
    except ValueError:
        return 1


class RunInterrupted(Exception):
    pass


@dataclass
class RunDir:
    """Single-writer run directory: config snapshot, seed, JSONL log, CSV, detector report."""

    path: Path
    records: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.path = Path(self.path)
        self.path.mkdir(parents=True, exist_ok=True)
        self._log = open(self.path / "log.jsonl", "w")

    def start(self, cfg: RunConfig, kind: str) -> None:
        (self.path / "config.json").write_text(cfg.snapshot())
        (self.path / "seed").write_text(f"{cfg.seed}\n")
        self.write({"kind": "header", "command": kind, "scenario": cfg.scenario, "seed": cfg.seed, "T": cfg.T})

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        self._log.write(dumps(rec) + "\n")
        self._log.flush()

    def finish(self, status: str = "complete") -> None:
        self.write({"kind": "end", "status": status})
        self._log.close()

    def write_text(self, name: str, text: str) -> None:
        (self.path / name).write_text(text)


def write_detectors(run: RunDir, cfg: RunConfig | None, records: list[dict]) -> DetectorReport:
    det = dict(cfg.detectors) if cfg is not None else {}
    report = analyze_log(records, **det)
    run.write_text("detectors.json", json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    run.write_text("log.csv", csv_projection(records))
    return report


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def simulate(cfg: RunConfig, out: Path, quiet: bool = True, command: str = "run") -> dict:
    if cfg.environment is None:
        raise ValueError("simulation needs a concrete environment")
    run = RunDir(out)
    run.start(cfg, command)
    status = "complete"
    try:
        res = run_simulation(
            cfg.society, cfg.environment, T=cfg.T, harvest=cfg.harvest, policy=cfg.policy, seed=cfg.seed,
            init=cfg.init, limit=cfg.objective.limit, on_record=run.write,
        )
        final_n = res.final.society.n
    except KeyboardInterrupt:
        status = "truncated"
        final_n = None
    finally:
        run.finish("truncated" if status != "complete" else "complete")
    records = [r for r in run.records if r.get("kind") == "iteration"]
    report = write_detectors(run, cfg, records)
    summary = {
        "status": status,
        "iterations": len(records),
        "final_n": final_n,
        "escape_flags": report.escape,
        "runaway_flags": report.runaway,
        "total_gfer_effective": float(sum(r["gfer_effective"] for r in records)),
    }
    if not quiet:
        for r in records:
            print(f"t={r['iteration']:4d} gfer={r['gfer_raw']:.6g} n={r['params']['n']}")
    if status != "complete":
        raise RunInterrupted(summary)
    return summary


def _history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("round", "candidate", "score", "accepted"))
    for h in history:
        w.writerow((h["round"], h["candidate"], repr(h["score"]), int(h["accepted"])))
    return buf.getvalue()


def optimize(cfg: RunConfig, out: Path, quiet: bool = True) -> dict:
    obj = cfg.raw.get("objective", {})
    mode = obj.get("mode", "inner")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    space = EncodingSpace(cfg.society, include_rho=cfg.objective.policy.enabled,
                          edge_bits=bool(obj.get("edge_bits", False)))
    run = RunDir(out)
    run.start(cfg, "optimize")
    summary: dict = {"mode": mode}
    history: list[dict] = []
    if mode == "inner":
        res = inner_optimize(space, cfg.environment, cfg.objective, int(obj.get("budget", 200)), rng,
                             seeds=SeedPlan(cfg.seed))
        history = res.history
        summary.update(score=res.score, encoding=list(res.encoding.coeffs), logits=list(res.encoding.logits))
    elif mode == "random":
        if cfg.family is None:
            raise ValueError("random outer loop needs an environment_family")
        envs = outer_random(cfg.family, int(obj.get("samples", 4)), rng)
        scores = []
        for i, env in enumerate(envs):
            res = inner_optimize(space, env, cfg.objective, int(obj.get("budget", 100)), rng,
                                 seeds=SeedPlan(cfg.seed), round_id=i)
            history += res.history
            scores.append(res.score)
        summary.update(scores=scores, mean_score=float(np.mean(scores)))
    elif mode == "adversarial":
        env = cfg.environment
        if env is None:
            env = outer_random(cfg.family, 1, rng)[0]
        res = outer_adversarial(
            env, space, cfg.objective, int(obj.get("rounds", 3)), float(obj.get("epsilon", 0.0)), rng,
            inner_budget=int(obj.get("inner_budget", 100)), adversary_budget=int(obj.get("adversary_budget", 30)),
        )
        for tr in res.trace:
            run.write({"kind": "round", **tr})
        summary.update(
            trace=res.trace, infeasible=res.infeasible,
            final_responsiveness=responsiveness(res.environment),
            encoding=list(res.society.coeffs),
        )
    else:
        raise ValueError(f"unknown optimize mode {mode!r}")
    for h in history:
        run.write({"kind": "candidate", **h})
    run.finish()
    run.write_text("history.csv", _history_csv(history))
    write_detectors(run, cfg, [])
    if not quiet:
        print(json.dumps({k: v for k, v in summary.items() if k != "trace"}, sort_keys=True))
    return summary


def phase(cfg: RunConfig, out: Path, quiet: bool = True) -> dict:
    sweep = cfg.raw.get("phase", {})
    n, seeds = int(sweep.get("n", 200)), int(sweep.get("seeds", 100))
    start, stop, stepsize = float(sweep.get("start", 0.2)), float(sweep.get("stop", 3.0)), float(sweep.get("step", 0.1))
    degrees = [round(start + i * stepsize, 10) for i in range(int(round((stop - start) / stepsize)) + 1)]
    tasks = [(n, c, seeds, cfg.seed, i) for i, c in enumerate(degrees)]
    workers = worker_count()
    if workers > 1:
        # points are independently seeded, so the result does not depend on the worker count
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_er_task, tasks))
    else:
        rows = [_er_task(t) for t in tasks]
    run = RunDir(out)
    run.start(cfg, "experiment")
    for r in rows:
        run.write({"kind": "sweep", **r})
    run.finish()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("mean_degree", "p", "median", "mean"))
    for r in rows:
        w.writerow((repr(r["mean_degree"]), repr(r["p"]), repr(r["median"]), repr(r["mean"])))
    run.write_text("sweep.csv", buf.getvalue())
    report = analyze_log([], **cfg.detectors)
    report.giant_component = [r["median"] for r in rows]
    run.write_text("detectors.json", json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    run.write_text("log.csv", csv_projection([]))
    cross = crossing_point(rows)
    medians = [r["median"] for r in rows]
    summary = {
        "crossing_mean_degree": cross,
        "monotone_median": all(a <= b for a, b in zip(medians, medians[1:])),
    }
    if not quiet:
        print(json.dumps(summary, sort_keys=True))
    return summary


def _er_task(args) -> dict:
    return er_point(*args)


def kelly(cfg: RunConfig, out: Path, quiet: bool = True) -> dict:
    summary = simulate(cfg, out, quiet=True, command="experiment")
    recs = [r for r in _read(out / "log.jsonl") if r.get("kind") == "iteration"]
    slope = float(np.mean([r["gfer_raw"] for r in recs])) if recs else float("nan")
    model = cfg.harvest.winnings
    closed = kelly_growth_rate(model, model.p)
    summary.update(log_wealth_slope=slope, closed_form=closed, gap=abs(slope - closed))
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    if not quiet:
        print(json.dumps(summary, sort_keys=True))
    return summary


def _read(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def malthus(cfg: RunConfig, out: Path, quiet: bool = True) -> dict:
    summary = simulate(cfg, out, quiet=True, command="experiment")
    result = {"escape_flags": summary["escape_flags"], "runaway_flags": summary["runaway_flags"]}
    if "control" in cfg.raw:
        raw = copy.deepcopy(cfg.raw)
        control = raw.pop("control")
        for section, values in control.items():
            raw.setdefault(section, {}).update(values)
        ctl = simulate(parse_config(raw), out / "control", quiet=True, command="experiment")
        result["control_escape_flags"] = ctl["escape_flags"]
    (out / "summary.json").write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    if not quiet:
        print(json.dumps(result, sort_keys=True))
    return result


def runaway(cfg: RunConfig, out: Path, quiet: bool = True) -> dict:
    summary = simulate(cfg, out, quiet=True, command="experiment")
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    if not quiet:
        print(json.dumps(summary, sort_keys=True))
    return summary


def adversarial(cfg: RunConfig, out: Path, quiet: bool = True) -> dict:
    summary = optimize(cfg, out, quiet=True)
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    if not quiet:
        print(json.dumps({k: v for k, v in summary.items() if k != "trace"}, sort_keys=True))
    return summary


RUNNERS: dict[str, Callable[[RunConfig, Path, bool], dict]] = {
    "malthus": malthus,
    "runaway": runaway,
    "phase": phase,
    "kelly": kelly,
    "adversarial": adversarial,
}


def run_scenario(name: str, cfg: RunConfig, out: Path, quiet: bool = True) -> dict:
    try:
        runner = RUNNERS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(PRESETS)}") from None
    return runner(cfg, Path(out), quiet)
