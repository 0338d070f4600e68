"""Thermodynamic costs, GFER allocation and structural change of the society.

The harvest of one iteration is split by the allocation distribution over the
seven chargeable parameters; each share is pushed through the inverse of that
parameter's cost function to give its value for the next iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from coevo.core import (
    GENERIC,
    AgentSpec,
    FunctionRule,
    KernelRule,
    LinearRingRule,
    MachineSpec,
    MessageGraph,
    RingCoeffs,
    TableRule,
    iter_domain,
)

TAU, MSG, N, STATE, R_S, R_E, FANOUT = "tau", "msg_card", "n", "state_card", "r_s", "r_e", "fanout"
PARAMETERS = (TAU, MSG, N, STATE, R_S, R_E, FANOUT)
DISCRETE = (TAU, MSG, N, STATE, FANOUT)

LOGIT_EDGE = 1e-9


class GrowthError(ValueError):
    pass


# --------------------------------------------------------------------------
# cost functions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CostFunction:
    """Strictly increasing, invertible price of holding a parameter value.

    ``identity``: ``C(z) = z``; ``power``: ``C(z) = z**exponent`` with
    ``0 < exponent <= 1``; ``logit``: ``C(z) = ceiling * tanh(z / scale)``,
    which saturates at ``ceiling``.
    """

    family: str = "identity"
    exponent: float = 1.0
    scale: float = 1.0
    ceiling: float = 1.0

    def __post_init__(self):
        if self.family not in ("identity", "power", "logit"):
            raise ValueError(f"unknown cost family {self.family!r}")
        if self.family == "power" and not (0 < self.exponent <= 1):
            raise ValueError("power exponent must lie in (0, 1]")
        if self.family == "logit" and (self.scale <= 0 or self.ceiling <= 0):
            raise ValueError("logit scale and ceiling must be positive")

    def cost(self, z: float) -> float:
        if z < 0:
            raise ValueError("parameter values are nonnegative")
        if self.family == "identity":
            return float(z)
        if self.family == "power":
            return float(z) ** self.exponent
        return self.ceiling * math.tanh(z / self.scale)

    def invert(self, energy: float) -> tuple[float, bool]:
        """``(C^-1(energy), clamped)``; logit energies at or above the ceiling are clamped."""
        if energy < 0:
            raise ValueError("energy must be nonnegative")
        if self.family == "identity":
            return float(energy), False
        if self.family == "power":
            return float(energy) ** (1.0 / self.exponent), False
        top = self.ceiling * (1.0 - LOGIT_EDGE)
        clamped = energy > top
        q = min(energy, top) / self.ceiling
        return self.scale * math.atanh(q), clamped

    def to_dict(self) -> dict:
        return {"family": self.family, "exponent": self.exponent, "scale": self.scale, "ceiling": self.ceiling}


def _cost_fn(kind: str, costs: Mapping[str, CostFunction] | None) -> CostFunction:
    if kind not in PARAMETERS:
        raise KeyError(f"unknown parameter {kind!r}")
    return (costs or {}).get(kind, CostFunction())


def cost(kind: str, value: float, costs: Mapping[str, CostFunction] | None = None) -> float:
    return _cost_fn(kind, costs).cost(value)


def invert_cost(kind: str, energy: float, costs: Mapping[str, CostFunction] | None = None) -> float:
    return _cost_fn(kind, costs).invert(energy)[0]


# --------------------------------------------------------------------------
# parameters and policy
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ComputationParams:
    tau: int
    msg_card: int
    n: int
    state_card: int
    r_s: float
    r_e: float
    fanout: int

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in PARAMETERS}

    def sigma_s(self, r_max: float = 1e6) -> float:
        return sigma_from_r(self.r_s, r_max)

    def sigma_e(self, r_max: float = 1e6) -> float:
        return sigma_from_r(self.r_e, r_max)


def sigma_from_r(r: float, r_max: float = 1e6) -> float:
    """``1/r``, except that precision at the cap ``r_max`` means a noiseless channel."""
    if r <= 0:
        raise ValueError("precision must be positive")
    if r >= r_max:
        return 0.0
    return min(1.0, 1.0 / r)


def _r_from_sigma(sigma: float, r_max: float) -> float:
    return r_max if sigma == 0 else min(r_max, 1.0 / sigma)


def params_of(society: AgentSpec, environment: AgentSpec, r_max: float = 1e6) -> ComputationParams:
    generic = [m.cardinality for m in society.machines if m.role == GENERIC]
    fanout = society.graph.max_fanout if society.graph.max_fanout is not None else society.graph.fanout()
    return ComputationParams(
        tau=society.tau,
        msg_card=society.msg_cardinality,
        n=society.n,
        state_card=max(generic, default=1),
        r_s=_r_from_sigma(society.sigma, r_max),
        r_e=_r_from_sigma(environment.sigma, r_max),
        fanout=fanout,
    )


def normalize_allocation(rho: Mapping[str, float]) -> dict[str, float]:
    """Validate an allocation distribution; missing parameters get 0."""
    out = {k: float(rho.get(k, 0.0)) for k in PARAMETERS}
    unknown = set(rho) - set(PARAMETERS)
    if unknown:
        raise ValueError(f"unknown allocation keys {sorted(unknown)}")
    if any(v < 0 for v in out.values()):
        raise ValueError("allocation fractions must be nonnegative")
    if abs(sum(out.values()) - 1.0) > 1e-12:
        raise ValueError(f"allocation fractions sum to {sum(out.values())!r}, not 1")
    return out


def uniform_allocation() -> dict[str, float]:
    return {k: 1.0 / len(PARAMETERS) for k in PARAMETERS}


@dataclass(frozen=True)
class GuttmanTemplate:
    name: str
    threshold: float
    cardinality: int | None = None


@dataclass(frozen=True)
class GrowthPolicy:
    attach: int = 1
    guttman: tuple[GuttmanTemplate, ...] = ()


DEFAULT_FLOORS = {TAU: 1, MSG: 1, N: 1, STATE: 1, FANOUT: 1, R_S: 1.0, R_E: 1.0}
DEFAULT_CEILINGS = {TAU: 16, MSG: 8, N: 32, STATE: 8, FANOUT: 32}


@dataclass(frozen=True)
class EvolutionPolicy:
    allocation: Mapping[str, float] = field(default_factory=uniform_allocation)
    costs: Mapping[str, CostFunction] = field(default_factory=dict)
    kappa: float = 1.0
    floors: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_FLOORS))
    ceilings: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_CEILINGS))
    r_max: float = 1e6
    growth: GrowthPolicy = field(default_factory=GrowthPolicy)
    rho_schedule: str = "fixed"
    rho_candidates: int = 8
    enabled: bool = True

    @classmethod
    def noop(cls) -> "EvolutionPolicy":
        return cls(enabled=False)

    def floor(self, kind: str) -> float:
        return self.floors.get(kind, DEFAULT_FLOORS[kind])

    def ceiling(self, kind: str) -> float:
        if kind in (R_S, R_E):
            return self.r_max
        return self.ceilings.get(kind, DEFAULT_CEILINGS[kind])


@dataclass
class Allocation:
    """Result of splitting one harvest over the parameters."""

    params: ComputationParams
    shares: dict[str, float]  # energy handed to each parameter
    raw: dict[str, float]  # C^-1(share), before rounding and clamping
    clamped: dict[str, bool]  # logit saturation flags
    spent: float  # sum of C(raw)
    overflow: float  # energy above a saturated logit ceiling; spent + overflow == budget
    discarded: float  # energy lost to rounding down and ceilings (never banked)
    floor_subsidy: float  # cost of lifting values up to their floors

    def to_dict(self) -> dict:
        return {
            "shares": self.shares,
            "raw": self.raw,
            "clamped": [k for k, v in self.clamped.items() if v],
            "spent": self.spent,
            "overflow": self.overflow,
            "discarded": self.discarded,
            "floor_subsidy": self.floor_subsidy,
        }


def allocate(gfer_effective: float, policy: EvolutionPolicy, rho: Mapping[str, float] | None = None) -> Allocation:
    if gfer_effective < 0:
        raise ValueError("gfer_effective must be nonnegative")
    rho = normalize_allocation(rho if rho is not None else policy.allocation)
    budget = policy.kappa * gfer_effective
    shares, raw, clamped, final = {}, {}, {}, {}
    spent = overflow = 0.0
    for kind in PARAMETERS:
        fn = _cost_fn(kind, policy.costs)
        shares[kind] = rho[kind] * budget
        raw[kind], clamped[kind] = fn.invert(shares[kind])
        c = fn.cost(raw[kind])
        spent += c
        if clamped[kind]:
            overflow += shares[kind] - c
        lo, hi = policy.floor(kind), policy.ceiling(kind)
        if kind in DISCRETE:
            final[kind] = int(min(max(math.floor(raw[kind] + 1e-9), lo), hi))
        else:
            final[kind] = float(min(max(raw[kind], lo), hi))
    params = ComputationParams(**final)
    gaps = [shares[k] - _cost_fn(k, policy.costs).cost(final[k]) for k in PARAMETERS]
    discarded = sum(g for g in gaps if g > 0)
    subsidy = -sum(g for g in gaps if g < 0)
    return Allocation(params, shares, raw, clamped, spent, overflow, discarded, subsidy)


def evolve_parameters(
    current: ComputationParams, gfer_effective: float, policy: EvolutionPolicy, rho: Mapping[str, float] | None = None
) -> ComputationParams:
    """Next-iteration parameters from this iteration's effective harvest."""
    if not policy.enabled:
        return current
    return allocate(gfer_effective, policy, rho).params


# --------------------------------------------------------------------------
# rule surgery
# --------------------------------------------------------------------------


def _rebuild(rule, card, msg_card, ext_cards, n_parents, old_card, old_msg, old_keyfn=None):
    """Rebuild a Table/Kernel rule over a new domain.

    ``old_keyfn(key)`` maps a new-domain key to the old key whose row it
    inherits, or ``None`` for rows that get the identity ``(x, 0)``.
    """
    ext_indices = rule.ext_indices
    proj = [ext_cards[i] for i in ext_indices]
    old_map = rule.table if isinstance(rule, TableRule) else rule.rows

    def default_key(key):
        x, e, inbox = key
        if x >= old_card or any(s >= old_msg for s in inbox):
            return None
        return key

    keyfn = old_keyfn or default_key
    new = {}
    for key in iter_domain(card, proj, msg_card, n_parents):
        old_key = keyfn(key)
        hit = old_map.get(old_key) if old_key is not None else None
        if isinstance(rule, TableRule):
            new[key] = (hit[0] % card, hit[1] % msg_card) if hit else (key[0], 0)
        else:
            if hit:
                merged: dict[tuple[int, int], float] = {}
                for (xn, m), p in hit:
                    pair = (xn % card, m % msg_card)
                    merged[pair] = merged.get(pair, 0.0) + p
                new[key] = tuple(merged.items())
            else:
                new[key] = (((key[0], 0), 1.0),)
    return type(rule)(new, ext_indices)


def add_parent_slot(rule, card: int, msg_card: int, ext_cards: Sequence[int], old_parents: int):
    """Append one ignored parent input to a rule."""
    if isinstance(rule, LinearRingRule):
        return LinearRingRule(replace(rule.state, c=rule.state.c + (0,)), replace(rule.message, c=rule.message.c + (0,)))
    if isinstance(rule, FunctionRule):
        fn = rule.fn
        return FunctionRule(lambda x, e, inbox: fn(x, e, inbox[:, :-1]), rule.n_parents + 1, rule.label)
    if isinstance(rule, (TableRule, KernelRule)):
        return _rebuild(rule, card, msg_card, ext_cards, old_parents + 1, card, msg_card,
                        lambda key: (key[0], key[1], key[2][:-1]))
    return rule


def remove_parent_slot(rule, position: int, card: int, msg_card: int, ext_cards: Sequence[int], old_parents: int):
    """Drop parent input ``position``; table rows are taken where it read 0."""
    if isinstance(rule, LinearRingRule):
        drop = lambda c: c[:position] + c[position + 1 :]  # noqa: E731
        return LinearRingRule(replace(rule.state, c=drop(rule.state.c)), replace(rule.message, c=drop(rule.message.c)))
    if isinstance(rule, FunctionRule):
        fn = rule.fn

        def wrapped(x, e, inbox):
            full = np.insert(inbox, position, 0, axis=1)
            return fn(x, e, full)

        return FunctionRule(wrapped, rule.n_parents - 1, rule.label)
    if isinstance(rule, (TableRule, KernelRule)):
        return _rebuild(rule, card, msg_card, ext_cards, old_parents - 1, card, msg_card,
                        lambda key: (key[0], key[1], key[2][:position] + (0,) + key[2][position:]))
    return rule


def resize_state_and_message_spaces(agent: AgentSpec, new_state_card: int, new_msg_card: int) -> AgentSpec:
    """Change ``|X|`` of every generic machine and the agent's ``|M|``.

    Growth keeps old rows and gives new symbols identity rows; shrinkage
    keeps in-range rows and reduces outputs modulo the new sizes.  Ring rules
    keep their coefficients under the new moduli.
    """
    if new_state_card < 1 or new_msg_card < 1:
        raise ValueError("sizes must be >= 1")
    old_msg = agent.msg_cardinality
    if all(m.cardinality == new_state_card for m in agent.machines if m.role == GENERIC) and old_msg == new_msg_card:
        return agent
    machines = []
    for v, m in enumerate(agent.machines):
        card = new_state_card if m.role == GENERIC else m.cardinality
        rule = m.rule
        n_pa = len(agent.parents(v))
        if isinstance(rule, (TableRule, KernelRule)):
            rule = _rebuild(rule, card, new_msg_card, agent.ext_cards, n_pa, m.cardinality, old_msg)
        elif isinstance(rule, FunctionRule):
            fn, c, mm = rule.fn, card, new_msg_card

            def wrapped(x, e, inbox, fn=fn, c=c, mm=mm):
                xs, ms = fn(x, e, inbox)
                return np.asarray(xs) % c, np.asarray(ms) % mm

            rule = FunctionRule(wrapped, rule.n_parents, rule.label)
        machines.append(replace(m, cardinality=card, rule=rule))
    return replace(agent, machines=tuple(machines), msg_cardinality=new_msg_card)


def map_states(states: np.ndarray, old: AgentSpec, new: AgentSpec, kept: Sequence[int] | None = None) -> np.ndarray:
    """Carry rows of joint state into a resized/regrown agent.

    ``kept[i]`` is the old index of new machine ``i`` (``-1`` for a new
    machine, which starts at 0).  Generic states are reduced modulo the new
    cardinality; store counts are carried unchanged.
    """
    if kept is None:
        kept = [i if i < old.n else -1 for i in range(new.n)]
    out = np.zeros((states.shape[0], new.n), dtype=np.int64)
    for i, j in enumerate(kept):
        if j < 0:
            continue
        col = states[:, j]
        if new.machines[i].role == GENERIC:
            col = col % new.machines[i].cardinality
        out[:, i] = col
    return out


# --------------------------------------------------------------------------
# growth and shrinkage
# --------------------------------------------------------------------------


@dataclass
class GrowthResult:
    agent: AgentSpec
    kept: list[int]  # old index of each machine in the new agent, -1 for new ones
    added: list[str] = field(default_factory=list)
    removed: list[int] = field(default_factory=list)
    stalled: bool = False


def _random_ring(rng: np.random.Generator, card: int, msg_card: int, n_ext: int, n_pa: int) -> LinearRingRule:
    def coeffs(mod):
        return RingCoeffs(
            int(rng.integers(mod)),
            tuple(int(v) for v in rng.integers(mod, size=n_ext)),
            tuple(int(v) for v in rng.integers(mod, size=n_pa)),
            int(rng.integers(mod)),
        )

    return LinearRingRule(coeffs(card), coeffs(msg_card))


def _with_edge(agent: AgentSpec, u: int, v: int) -> AgentSpec:
    """Add edge ``u -> v``, giving ``v``'s rule an extra ignored input."""
    m = agent.machines[v]
    n_pa = len(agent.parents(v))
    if u < max(agent.parents(v), default=-1):
        raise GrowthError("new parents must have the highest index")
    rule = add_parent_slot(m.rule, m.cardinality, agent.msg_cardinality, agent.ext_cards, n_pa) if m.rule else None
    machines = list(agent.machines)
    machines[v] = replace(m, rule=rule)
    graph = MessageGraph(agent.graph.n, agent.graph.edges + ((u, v),), agent.graph.max_fanout)
    return replace(agent, machines=tuple(machines), graph=graph)


def _without_edge(agent: AgentSpec, u: int, v: int) -> AgentSpec:
    m = agent.machines[v]
    parents = agent.parents(v)
    pos = parents.index(u)
    rule = (
        remove_parent_slot(m.rule, pos, m.cardinality, agent.msg_cardinality, agent.ext_cards, len(parents))
        if m.rule
        else None
    )
    machines = list(agent.machines)
    machines[v] = replace(m, rule=rule)
    edges = tuple(e for e in agent.graph.edges if e != (u, v))
    return replace(agent, machines=tuple(machines), graph=MessageGraph(agent.graph.n, edges, agent.graph.max_fanout))


def _remove_machine(agent: AgentSpec, v: int) -> AgentSpec:
    for c in agent.graph.children(v):
        agent = _without_edge(agent, v, c)
    remap = lambda i: i if i < v else i - 1  # noqa: E731
    edges = tuple((remap(a), remap(b)) for a, b in agent.graph.edges if a != v and b != v)
    machines = agent.machines[:v] + agent.machines[v + 1 :]
    return replace(agent, machines=machines, graph=MessageGraph(agent.graph.n - 1, edges, agent.graph.max_fanout))


def set_fanout_cap(agent: AgentSpec, cap: int) -> AgentSpec:
    """Impose a fan-out cap, dropping each over-full node's highest-index children."""
    for u in range(agent.n):
        children = list(agent.graph.children(u))
        while len(children) > cap:
            agent = _without_edge(agent, u, children.pop())
    return replace(agent, graph=MessageGraph(agent.graph.n, agent.graph.edges, cap))


def _next_template(agent: AgentSpec, policy: GrowthPolicy) -> int:
    names = [t.name for t in policy.guttman]
    present = {m.name for m in agent.machines}
    consumed = 0
    while consumed < len(names) and names[consumed] in present:
        consumed += 1
    return consumed


def grow_machines(
    agent: AgentSpec,
    target_n: int,
    policy: GrowthPolicy,
    rng: np.random.Generator,
    gfer_max: float = math.inf,
    state_card: int | None = None,
) -> GrowthResult:
    """Add (or remove) machines until the agent has ``target_n`` of them.

    New machines get random ring rules and are wired by uniform random
    attachment under the fan-out cap.  With a Guttman sequence, each new
    machine takes the next unconsumed template, and growth stalls once the
    next template's GFER threshold has not been reached.
    """
    kept = list(range(agent.n))
    if target_n < 1:
        raise ValueError("target_n must be >= 1")
    if target_n < agent.n:
        removed = []
        while agent.n > target_n:
            generic = [v for v, m in enumerate(agent.machines) if m.role == GENERIC]
            if not generic:
                break
            v = generic[-1]
            agent = _remove_machine(agent, v)
            removed.append(kept.pop(v))
        return GrowthResult(agent, kept, removed=removed, stalled=agent.n > target_n)
    cap = agent.graph.max_fanout
    if cap == 0 and policy.attach > 0 and target_n > agent.n:
        raise GrowthError("fan-out cap 0 cannot connect new machines")
    if state_card is None:
        state_card = max((m.cardinality for m in agent.machines if m.role == GENERIC), default=2)
    added: list[str] = []
    stalled = False
    while agent.n < target_n:
        name = ""
        card = state_card
        if policy.guttman:
            idx = _next_template(agent, policy)
            if idx >= len(policy.guttman) or gfer_max < policy.guttman[idx].threshold:
                stalled = True
                break
            template = policy.guttman[idx]
            name = template.name
            card = template.cardinality or state_card
        v = agent.n
        limit = cap if cap is not None else math.inf
        candidates = [u for u in range(v) if agent.graph.out_degree(u) < limit]
        parents = sorted(rng.permutation(candidates)[: policy.attach].tolist()) if candidates else []
        n_children = min(policy.attach, v, int(limit) if cap is not None else v)
        children = sorted(rng.permutation(v)[:n_children].tolist()) if v else []
        rule = _random_ring(rng, card, agent.msg_cardinality, len(agent.ext_cards), len(parents))
        machines = agent.machines + (MachineSpec(card, rule, GENERIC, name),)
        edges = agent.graph.edges + tuple((u, v) for u in parents)
        agent = replace(agent, machines=machines, graph=MessageGraph(v + 1, edges, cap))
        for c in children:
            agent = _with_edge(agent, v, c)
        kept.append(-1)
        added.append(name or f"m{v}")
    return GrowthResult(agent, kept, added=added, stalled=stalled)


@dataclass
class ApplyResult:
    society: AgentSpec
    environment: AgentSpec
    kept: list[int]
    growth: GrowthResult


def apply_parameters(
    society: AgentSpec,
    environment: AgentSpec,
    params: ComputationParams,
    policy: EvolutionPolicy,
    rng: np.random.Generator,
    gfer_max: float = math.inf,
) -> ApplyResult:
    """Rebuild the society for new parameters; only ``sigma`` of the environment changes."""
    soc = society
    if soc.graph.max_fanout != params.fanout:
        soc = set_fanout_cap(soc, params.fanout)
    growth = grow_machines(soc, params.n, policy.growth, rng, gfer_max, state_card=params.state_card)
    soc = growth.agent
    soc = resize_state_and_message_spaces(soc, params.state_card, params.msg_card)
    soc = replace(soc, tau=params.tau, sigma=params.sigma_s(policy.r_max))
    env = replace(environment, sigma=params.sigma_e(policy.r_max))
    return ApplyResult(soc, env, growth.kept, growth)


def dirichlet_allocations(rng: np.random.Generator, count: int) -> list[dict[str, float]]:
    out = []
    for _ in range(count):
        w = rng.dirichlet(np.ones(len(PARAMETERS)))
        w = w / w.sum()
        d = dict(zip(PARAMETERS, (float(v) for v in w)))
        # push round-off into the largest share so the sum is exactly 1 within 1e-12
        top = max(d, key=d.get)
        d[top] += 1.0 - sum(d.values())
        out.append(d)
    return out

