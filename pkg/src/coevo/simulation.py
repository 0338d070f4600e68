"""The co-evolution loop: iterate, harvest, deplete, evolve, log."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from coevo.core import AgentSpec
from coevo.detectors import giant_component_fraction
from coevo.engine import (
    DEFAULT_ENUMERATION_LIMIT,
    EVOLVE,
    HARVEST,
    IterationOutcome,
    Population,
    SeedPlan,
    _Rows,
    distribution_population,
    iterate,
    point_population,
    uniform_population,
)
from coevo.evolution import (
    EvolutionPolicy,
    allocate,
    apply_parameters,
    dirichlet_allocations,
    map_states,
    normalize_allocation,
    params_of,
)
from coevo.harvest import WinningsModel, deplete, outcome_mi

HARVEST_MODES = ("mi_exact", "mi_plugin", "kelly")
BET_MODES = ("proportional", "side_info", "states")
PROXIES = ("n", "log_states", "r_e")


@dataclass(frozen=True)
class HarvestSpec:
    """How GFER is computed from an iteration.

    ``population_gain`` couples the harvest to the society's size:
    ``GFER = base * N**population_gain`` (0 leaves the base harvest alone).
    """

    mode: str = "mi_exact"
    replicates: int = 1000
    miller_madow: bool = False
    population_gain: float = 0.0
    winnings: WinningsModel | None = None
    bet: str = "proportional"
    store: float | None = None

    def __post_init__(self):
        if self.mode not in HARVEST_MODES:
            raise ValueError(f"harvest mode must be one of {HARVEST_MODES}")
        if self.mode == "kelly" and self.winnings is None:
            raise ValueError("kelly harvest needs a winnings model")
        if self.bet not in BET_MODES:
            raise ValueError(f"bet must be one of {BET_MODES}")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.store is not None and self.store < 0:
            raise ValueError("store must be nonnegative")

    @property
    def exact(self) -> bool:
        return self.mode == "mi_exact"

    @property
    def estimator(self) -> str:
        if self.mode == "mi_plugin":
            return f"plugin({self.replicates})"
        return "exact" if self.exact else "kelly"


@dataclass
class SimState:
    society: AgentSpec
    environment: AgentSpec
    population: Population
    store: Fraction | None
    rho: dict[str, float]
    gfer_max: float = 0.0
    iteration: int = 0


def initial_population(
    society: AgentSpec, environment: AgentSpec, init: Any, harvest: HarvestSpec, seeds: SeedPlan,
    limit: int = DEFAULT_ENUMERATION_LIMIT,
) -> Population:
    """``init`` is ``"uniform"``, ``{"society": [...], "environment": [...]}`` or a
    list of ``[xs, xe, p]`` triples."""
    exact, R = harvest.exact, harvest.replicates
    if init is None or init == "uniform":
        return uniform_population(society, environment, exact=exact, R=R, seeds=seeds, limit=limit)
    if isinstance(init, Mapping):
        xs = init.get("society", [0] * society.n)
        xe = init.get("environment", [0] * environment.n)
        return point_population(xs, xe, R, exact)
    return distribution_population([(a, b, float(p)) for a, b, p in init], exact=exact, R=R, seeds=seeds)


def population_proxies(society: AgentSpec, r_e: float) -> dict[str, float]:
    return {
        "n": float(society.n),
        "log_states": float(sum(math.log2(k) for k in society.cardinalities)),
        "r_e": float(r_e),
    }


# --------------------------------------------------------------------------
# harvest
# --------------------------------------------------------------------------


def _inverse_cdf(p: Sequence[float], u: np.ndarray) -> np.ndarray:
    return np.minimum(np.searchsorted(np.cumsum(p), u, side="right"), len(p) - 1)


def kelly_fractions(outcome: IterationOutcome, hv: HarvestSpec, y: np.ndarray | None) -> np.ndarray:
    model = hv.winnings
    R, k = outcome.weights.shape[0], model.k
    if hv.bet == "proportional":
        return np.tile(np.asarray(model.p), (R, 1))
    if hv.bet == "side_info":
        post = np.stack([model.posterior(j) for j in range(len(model.side_channel[0]))])
        return post[y]
    # bets read off the society's end state: f_w proportional to 1 + x_w
    xs = np.zeros((R, k), dtype=float)
    m = min(k, outcome.xs.shape[1])
    xs[:, :m] = outcome.xs[:, :m]
    f = 1.0 + xs
    return f / f.sum(axis=1, keepdims=True)


def kelly_harvest(outcome: IterationOutcome, hv: HarvestSpec, seeds: SeedPlan, iteration: int) -> float:
    """Mean realised ``log2`` growth of one round of betting."""
    model = hv.winnings
    R = outcome.weights.shape[0]
    w = _inverse_cdf(model.p, seeds.uniforms((HARVEST, iteration, 0), R))
    y = None
    if hv.bet == "side_info":
        if model.side_channel is None:
            raise ValueError("side_info bets need a side channel")
        chan = np.asarray(model.side_channel)
        u = seeds.uniforms((HARVEST, iteration, 1), R)
        cum = np.cumsum(chan[w], axis=1)
        y = np.minimum((cum <= u[:, None]).sum(axis=1), chan.shape[1] - 1)
    f = kelly_fractions(outcome, hv, y)
    odds = np.asarray(model.odds)
    with np.errstate(divide="ignore"):
        g = np.log2(odds[w] * f[np.arange(R), w])
    return float(np.dot(outcome.weights, g))


def harvest_outcome(
    outcome: IterationOutcome, society: AgentSpec, environment: AgentSpec, hv: HarvestSpec, seeds: SeedPlan,
    iteration: int,
) -> float:
    if hv.mode == "kelly":
        base = kelly_harvest(outcome, hv, seeds, iteration)
    else:
        base = outcome_mi(outcome, society, environment, miller_madow=hv.miller_madow)
    if hv.population_gain:
        base *= float(society.n) ** hv.population_gain
    return base


# --------------------------------------------------------------------------
# one iteration of the loop
# --------------------------------------------------------------------------


@dataclass
class StepSettings:
    harvest: HarvestSpec
    policy: EvolutionPolicy
    seeds: SeedPlan
    limit: int = DEFAULT_ENUMERATION_LIMIT


def _carry_population(pop: Population, old: AgentSpec, new: AgentSpec, kept: Sequence[int]) -> Population:
    if old is new:
        return pop
    xs = map_states(pop.xs, old, new, kept)
    if not pop.exact:
        return replace(pop, xs=xs)
    fields = {"xs": xs, "xe": pop.xe}
    if pop.tapes_s is not None:
        fields["ts"] = pop.tapes_s
    if pop.tapes_e is not None:
        fields["te"] = pop.tapes_e
    rows = _Rows(pop.weights, **fields)
    rows.merge()
    return Population(rows.f["xs"], rows.f["xe"], rows.w, True, rows.f.get("ts"), rows.f.get("te"))


def _evolve(state: SimState, eff: float, rho: Mapping[str, float], settings: StepSettings):
    policy = settings.policy
    if not policy.enabled:
        return state.society, state.environment, None, None
    alloc = allocate(eff, policy, rho)
    rng = settings.seeds.generator(EVOLVE, state.iteration, 0)
    applied = apply_parameters(state.society, state.environment, alloc.params, policy, rng, state.gfer_max)
    return applied.society, applied.environment, alloc, applied


def _peek(state: SimState, eff: float, rho, outcome: IterationOutcome, settings: StepSettings) -> float:
    """GFER of the next iteration if ``rho`` were used now (common random numbers)."""
    soc, env, _, applied = _evolve(state, eff, rho, settings)
    pop = outcome.next_population()
    if applied is not None:
        pop = _carry_population(pop, state.society, soc, applied.kept)
    nxt = iterate(soc, env, pop, seeds=settings.seeds, iteration=state.iteration + 1, limit=settings.limit)
    return harvest_outcome(nxt, soc, env, settings.harvest, settings.seeds, state.iteration + 1)


def step(state: SimState, settings: StepSettings, rho_override: Mapping[str, float] | None = None) -> tuple[SimState, dict]:
    """Run one iteration and evolve; returns the next state and its log record."""
    t = state.iteration
    soc, env = state.society, state.environment
    outcome = iterate(soc, env, state.population, seeds=settings.seeds, iteration=t, limit=settings.limit)
    raw = harvest_outcome(outcome, soc, env, settings.harvest, settings.seeds, t)
    store_before = state.store
    if math.isnan(raw) or raw == math.inf:
        raise ValueError(f"harvest is {raw}")
    raw_f = Fraction(raw) if math.isfinite(raw) else Fraction(0)
    if state.store is None:
        eff_exact, store_after = max(raw_f, Fraction(0)), None
    else:
        eff_exact, store_after = deplete(state.store, raw_f)
    eff = float(eff_exact)
    gmax = max(state.gfer_max, eff)
    state = replace(state, gfer_max=gmax)

    rho = dict(rho_override) if rho_override is not None else state.rho
    policy = settings.policy
    if policy.enabled and policy.rho_schedule == "per_iteration" and rho_override is None:
        cands = [state.rho] + dirichlet_allocations(settings.seeds.generator(EVOLVE, t, 1), policy.rho_candidates)
        scores = [_peek(state, eff, c, outcome, settings) for c in cands]
        rho = cands[int(np.argmax(scores))]

    new_soc, new_env, alloc, applied = _evolve(state, eff, rho, settings)
    pop = outcome.next_population()
    if applied is not None:
        pop = _carry_population(pop, soc, new_soc, applied.kept)
    params = params_of(soc, env, policy.r_max)
    record = {
        "kind": "iteration",
        "iteration": t,
        "gfer_raw": raw,
        "gfer_effective": eff,
        "estimator": settings.harvest.estimator,
        "store_before": None if store_before is None else float(store_before),
        "store_after": None if store_after is None else float(store_after),
        "params": params.as_dict(),
        "sigma_s": soc.sigma,
        "sigma_e": env.sigma,
        "population": population_proxies(soc, params.r_e),
        "giant_component": giant_component_fraction(soc.graph),
        "rows": int(outcome.weights.shape[0]),
        "rho": {k: rho[k] for k in sorted(rho)},
    }
    if store_after is not None:
        # exact rationals, so depletion can be audited without float round-off
        record["store_exact"] = {"before": str(store_before), "after": str(store_after), "effective": str(eff_exact)}
    if alloc is not None:
        record["allocation"] = alloc.to_dict()
        record["growth"] = {
            "added": applied.growth.added,
            "removed": applied.growth.removed,
            "stalled": applied.growth.stalled,
        }
    nxt = SimState(new_soc, new_env, pop, store_after, rho, gmax, t + 1)
    return nxt, record


# --------------------------------------------------------------------------
# whole runs
# --------------------------------------------------------------------------


@dataclass
class SimulationResult:
    records: list[dict]
    final: SimState
    truncated: bool = False

    @property
    def gfer(self) -> list[float]:
        return [r["gfer_raw"] for r in self.records]


def run_simulation(
    society: AgentSpec,
    environment: AgentSpec,
    *,
    T: int,
    harvest: HarvestSpec,
    policy: EvolutionPolicy,
    seed: int,
    init: Any = "uniform",
    limit: int = DEFAULT_ENUMERATION_LIMIT,
    on_record: Callable[[dict], None] | None = None,
) -> SimulationResult:
    seeds = SeedPlan(seed)
    pop = initial_population(society, environment, init, harvest, seeds, limit)
    store = None if harvest.store is None else Fraction(harvest.store)
    state = SimState(society, environment, pop, store, normalize_allocation(policy.allocation))
    settings = StepSettings(harvest, policy, seeds, limit)
    records = []
    for _ in range(T):
        state, rec = step(state, settings)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return SimulationResult(records, state)


def dumps(record: Mapping) -> str:
    """Canonical one-line JSON used for every log line."""
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=True)


CSV_COLUMNS = (
    "iteration", "gfer_raw", "gfer_effective", "store_after", "n", "state_card", "msg_card", "tau",
    "r_s", "r_e", "fanout", "sigma_s", "sigma_e", "giant_component", "rows",
)


def csv_projection(records: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        if r.get("kind") != "iteration":
            continue
        p = r["params"]
        w.writerow([
            r["iteration"], repr(r["gfer_raw"]), repr(r["gfer_effective"]),
            "" if r["store_after"] is None else repr(r["store_after"]),
            p["n"], p["state_card"], p["msg_card"], p["tau"], repr(p["r_s"]), repr(p["r_e"]), p["fanout"],
            repr(r["sigma_s"]), repr(r["sigma_e"]), repr(r["giant_component"]), r["rows"],
        ])
    return buf.getvalue()


def read_log(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out

