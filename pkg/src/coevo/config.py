"""JSON run configuration.

Schema (all keys optional unless noted)::

    {
      "society":      AGENT (required),
      "environment":  AGENT (required unless "environment_family" is given),
      "environment_family": {"n", "cardinality", "msg_cardinality", "edge_p", "tau", "sigma", "ext_cards"},
      "harvest":   {"mode": "mi_exact" | "mi_plugin" | "kelly", "replicates", "miller_madow",
                    "population_gain", "store", "bet", "winnings": {"p", "odds", "side_sigma"}},
      "evolution": {"enabled", "allocation": {param: fraction}, "kappa", "rho_schedule",
                    "rho_candidates", "r_max", "floors", "ceilings",
                    "costs": {param: {"family", "exponent", "scale", "ceiling"}},
                    "growth": {"attach", "guttman": [{"name", "threshold", "cardinality"}]}},
      "objective": {"horizon", "gamma", "myopic", "budget", "rounds", "epsilon",
                    "inner_budget", "adversary_budget", "mode": "inner" | "adversarial" | "random"},
      "detectors": {"delta", "k_escape", "threshold", "k_runaway", "proxy"},
      "init": "uniform" | {"society": [...], "environment": [...]} | [[xs, xe, p], ...],
      "T": int, "seed": int, "scenario": str, "limit": int
    }

    AGENT = {"machines": [MACHINE, ...], "edges": [[u, v], ...], "max_fanout", "tau",
             "msg_cardinality", "sigma", "ext_cards", "ledger_addresses"}
          | {"adapter": "ca", "rule", "width", "tau"}
          | {"adapter": "glauber", "J", "beta", "h", "tau"}
    MACHINE = {"cardinality", "role", "name", "rule": RULE}
    RULE = {"type": "ring", "state": [a, [b...], [c...], d], "message": [...]}
         | {"type": "identity"} | {"type": "copy", "index": i}
         | {"type": "table", "ext_indices": [...], "rows": [[x, [e...], [in...], x', m], ...]}
         | {"type": "kernel", "ext_indices": [...], "rows": [[x, [e...], [in...], [[x', m, p], ...]], ...]}
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from coevo.adapters import ca_to_mcm, glauber_mcm
from coevo.core import (
    GENERIC,
    AgentSpec,
    KernelRule,
    MachineSpec,
    MessageGraph,
    TableRule,
    ValidationReport,
    identity_rule,
    ring_rule,
    validate_agent,
)
from coevo.evolution import (
    DEFAULT_CEILINGS,
    DEFAULT_FLOORS,
    PARAMETERS,
    CostFunction,
    EvolutionPolicy,
    GrowthPolicy,
    GuttmanTemplate,
    normalize_allocation,
    uniform_allocation,
)
from coevo.harvest import WinningsModel, symmetric_side_channel
from coevo.optimize import EnvironmentFamily, ObjectiveSpec
from coevo.simulation import HarvestSpec, PROXIES


class ConfigError(ValueError):
    """The configuration does not parse or does not validate."""

    def __init__(self, message: str, report: ValidationReport | None = None):
        super().__init__(message)
        self.report = report


# --------------------------------------------------------------------------
# agents
# --------------------------------------------------------------------------


def _rule(node: Mapping, n_ext: int, n_parents: int):
    kind = node.get("type", "ring")
    if kind == "identity":
        return identity_rule(n_ext, n_parents)
    if kind == "copy":
        i = int(node.get("index", 0))
        b = [0] * n_ext
        b[i] = 1
        return ring_rule(n_ext, n_parents, state=(0, b, [0] * n_parents, 0))
    if kind == "ring":
        return ring_rule(n_ext, n_parents, state=node.get("state"), message=node.get("message"))
    if kind == "table":
        table = {(int(x), tuple(e), tuple(i)): (int(xn), int(m)) for x, e, i, xn, m in node["rows"]}
        return TableRule(table, tuple(node.get("ext_indices", ())))
    if kind == "kernel":
        rows = {
            (int(x), tuple(e), tuple(i)): tuple(((int(a), int(b)), float(p)) for a, b, p in outs)
            for x, e, i, outs in node["rows"]
        }
        return KernelRule(rows, tuple(node.get("ext_indices", ())))
    raise ConfigError(f"unknown rule type {kind!r}")


def build_agent(node: Mapping) -> AgentSpec:
    adapter = node.get("adapter")
    if adapter == "ca":
        return ca_to_mcm(int(node["rule"]), int(node["width"]), tau=int(node.get("tau", 1)),
                         ext_cards=tuple(node.get("ext_cards", ())))
    if adapter == "glauber":
        return glauber_mcm(node["J"], float(node["beta"]), node.get("h", 0.0), tau=int(node.get("tau", 1)),
                           ext_cards=tuple(node.get("ext_cards", ())))
    if adapter is not None:
        raise ConfigError(f"unknown adapter {adapter!r}")
    try:
        machines_raw = node["machines"]
    except KeyError:
        raise ConfigError("agent needs a 'machines' list") from None
    n = len(machines_raw)
    edges = tuple((int(u), int(v)) for u, v in node.get("edges", ()))
    graph = MessageGraph(n, edges, node.get("max_fanout"))
    ext_cards = tuple(int(k) for k in node.get("ext_cards", ()))
    machines = []
    for v, m in enumerate(machines_raw):
        role = m.get("role", GENERIC)
        n_pa = len(graph.parents(v)) if all(0 <= a < n and 0 <= b < n for a, b in edges) else 0
        rule = _rule(m["rule"], len(ext_cards), n_pa) if m.get("rule") is not None else None
        machines.append(MachineSpec(int(m["cardinality"]), rule, role, m.get("name", "")))
    return AgentSpec(
        tuple(machines), graph,
        tau=int(node.get("tau", 1)),
        msg_cardinality=int(node.get("msg_cardinality", 2)),
        sigma=float(node.get("sigma", 0.0)),
        ext_cards=ext_cards,
        ledger_addresses=int(node.get("ledger_addresses", 1)),
    )


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------


def build_harvest(node: Mapping) -> HarvestSpec:
    winnings = None
    if "winnings" in node:
        w = node["winnings"]
        side = symmetric_side_channel(len(w["p"]), float(w["side_sigma"])) if "side_sigma" in w else None
        winnings = WinningsModel(tuple(w["p"]), tuple(w["odds"]), side)
    return HarvestSpec(
        mode=node.get("mode", "mi_exact"),
        replicates=int(node.get("replicates", 1000)),
        miller_madow=bool(node.get("miller_madow", False)),
        population_gain=float(node.get("population_gain", 0.0)),
        winnings=winnings,
        bet=node.get("bet", "proportional"),
        store=node.get("store"),
    )


def build_policy(node: Mapping) -> EvolutionPolicy:
    if not node:
        return EvolutionPolicy.noop()
    costs = {k: CostFunction(**v) for k, v in node.get("costs", {}).items()}
    unknown = set(costs) - set(PARAMETERS)
    if unknown:
        raise ConfigError(f"costs for unknown parameters {sorted(unknown)}")
    growth = node.get("growth", {})
    guttman = tuple(GuttmanTemplate(g["name"], float(g.get("threshold", 0.0)), g.get("cardinality"))
                    for g in growth.get("guttman", ()))
    floors = {**DEFAULT_FLOORS, **node.get("floors", {})}
    ceilings = {**DEFAULT_CEILINGS, **node.get("ceilings", {})}
    policy = EvolutionPolicy(
        allocation=normalize_allocation(node.get("allocation", uniform_allocation())),
        costs=costs,
        kappa=float(node.get("kappa", 1.0)),
        floors=floors,
        ceilings=ceilings,
        r_max=float(node.get("r_max", 1e6)),
        growth=GrowthPolicy(int(growth.get("attach", 1)), guttman),
        rho_schedule=node.get("rho_schedule", "fixed"),
        rho_candidates=int(node.get("rho_candidates", 8)),
        enabled=bool(node.get("enabled", True)),
    )
    return policy


def check_policy(policy: EvolutionPolicy) -> list[str]:
    out = []
    for k in ("tau", "msg_card", "n", "state_card", "fanout"):
        if policy.floor(k) < 1:
            out.append(f"floor for {k} must be >= 1")
        if policy.ceiling(k) < policy.floor(k):
            out.append(f"ceiling for {k} is below its floor")
    for k in ("r_s", "r_e"):
        if not (0 < policy.floor(k) <= policy.r_max):
            out.append(f"floor for {k} must lie in (0, r_max]")
    if policy.rho_schedule not in ("fixed", "per_iteration"):
        out.append("rho_schedule must be 'fixed' or 'per_iteration'")
    if policy.kappa < 0:
        out.append("kappa must be nonnegative")
    return out


# --------------------------------------------------------------------------
# run config
# --------------------------------------------------------------------------


@dataclass
class RunConfig:
    raw: dict
    society: AgentSpec
    environment: AgentSpec | None
    family: EnvironmentFamily | None
    harvest: HarvestSpec
    policy: EvolutionPolicy
    objective: ObjectiveSpec
    detectors: dict = field(default_factory=dict)
    init: Any = "uniform"
    T: int = 10
    seed: int = 0
    scenario: str | None = None

    def snapshot(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2) + "\n"


DETECTOR_DEFAULTS = {"delta": 0.05, "k_escape": 3, "threshold": 0.1, "k_runaway": 2, "proxy": "n"}


def parse_config(raw: Mapping) -> RunConfig:
    """Build and validate a :class:`RunConfig`; raises :class:`ConfigError`."""
    raw = copy.deepcopy(dict(raw))
    try:
        if "society" not in raw:
            raise ConfigError("config needs a 'society' agent")
        society = build_agent(raw["society"])
        environment = build_agent(raw["environment"]) if "environment" in raw else None
        family = EnvironmentFamily(**{
            k: (tuple(v) if k == "ext_cards" else v) for k, v in raw["environment_family"].items()
        }) if "environment_family" in raw else None
        if environment is None and family is None:
            raise ConfigError("config needs an 'environment' or an 'environment_family'")
        harvest = build_harvest(raw.get("harvest", {}))
        policy = build_policy(raw.get("evolution", {}))
        obj = raw.get("objective", {})
        limit = int(raw.get("limit", 1 << 20))
        objective = ObjectiveSpec(
            horizon=int(obj.get("horizon", 1)),
            gamma=float(obj.get("gamma", 1.0)),
            harvest=harvest,
            policy=policy if obj.get("evolve", False) else EvolutionPolicy.noop(),
            init=raw.get("init", "uniform"),
            myopic=bool(obj.get("myopic", False)),
            limit=limit,
        )
        detectors = {**DETECTOR_DEFAULTS, **raw.get("detectors", {})}
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"config does not parse: {exc}") from exc
    problems = []
    for label, agent in (("society", society), ("environment", environment)):
        if agent is None:
            continue
        rep = validate_agent(agent)
        problems += [f"{label}: {v}" for v in rep.violations]
    problems += [f"evolution: {p}" for p in check_policy(policy)]
    if detectors["proxy"] not in PROXIES:
        problems.append(f"detectors: proxy must be one of {PROXIES}")
    T = raw.get("T", 10)
    if not isinstance(T, int) or T < 0:
        problems.append("T must be a nonnegative integer")
    if problems:
        raise ConfigError("config failed validation", ValidationReport(problems))
    return RunConfig(
        raw=raw, society=society, environment=environment, family=family, harvest=harvest, policy=policy,
        objective=objective, detectors=detectors, init=raw.get("init", "uniform"), T=T,
        seed=int(raw.get("seed", 0)), scenario=raw.get("scenario"),
    )


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw)
