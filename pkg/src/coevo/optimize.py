"""Society policy search and environment selection.

Policies are encoded over linear ring rules: every generic machine of an
agent contributes its state and message coefficients, optionally followed by
softmax logits for the allocation distribution and a bitmask over candidate
message edges.  Ledger and store machines keep their rules.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from coevo.core import (
    GENERIC,
    AgentSpec,
    LinearRingRule,
    MachineSpec,
    MessageGraph,
    RingCoeffs,
    validate_agent,
)
from coevo.engine import (
    DEFAULT_ENUMERATION_LIMIT,
    KERNEL,
    SOCIETY,
    EnumerationLimitError,
    SeedPlan,
    _Rows,
    compile_agent,
    _run_agent_rows,
)
from coevo.evolution import PARAMETERS, EvolutionPolicy, normalize_allocation, uniform_allocation
from coevo.harvest import mutual_information_bits
from coevo.simulation import HarvestSpec, SimState, StepSettings, initial_population, step

INVALID = -math.inf


# --------------------------------------------------------------------------
# encoding
# --------------------------------------------------------------------------


def _canonical_logits(logits: Sequence[float]) -> tuple[float, ...]:
    arr = np.asarray(logits, dtype=float)
    shift = arr.max() + math.log(np.exp(arr - arr.max()).sum())
    return tuple(float(v) for v in arr - shift)


def softmax(logits: Sequence[float]) -> dict[str, float]:
    arr = np.exp(np.asarray(logits, dtype=float) - max(logits))
    arr = arr / arr.sum()
    out = dict(zip(PARAMETERS, (float(v) for v in arr)))
    top = max(out, key=out.get)
    out[top] += 1.0 - sum(out.values())
    return out


@dataclass(frozen=True)
class PolicyEncoding:
    coeffs: tuple[int, ...]
    logits: tuple[float, ...] = ()
    edges: tuple[int, ...] = ()


@dataclass(frozen=True)
class EncodingSpace:
    """Layout of :class:`PolicyEncoding` vectors for one base agent.

    With ``edge_bits`` every ordered pair ``(u, v)`` with ``v`` encoded gets a
    bit, and each encoded machine carries one ``c`` coefficient per potential
    parent; only the coefficients of present edges are used.
    """

    base: AgentSpec
    include_rho: bool = True
    edge_bits: bool = False

    @property
    def encoded(self) -> tuple[int, ...]:
        return tuple(v for v, m in enumerate(self.base.machines) if m.role == GENERIC)

    def _potential_parents(self, v: int) -> tuple[int, ...]:
        if self.edge_bits:
            return tuple(u for u in range(self.base.n) if u != v)
        return self.base.parents(v)

    @property
    def edge_pairs(self) -> tuple[tuple[int, int], ...]:
        if not self.edge_bits:
            return ()
        return tuple((u, v) for v in self.encoded for u in self._potential_parents(v))

    def _block(self, v: int) -> int:
        return 2 * (2 + len(self.base.ext_cards) + len(self._potential_parents(v)))

    def moduli(self) -> list[int]:
        """Modulus of every coefficient slot."""
        out = []
        msg = self.base.msg_cardinality
        for v in self.encoded:
            card = self.base.machines[v].cardinality
            half = self._block(v) // 2
            out += [card] * half + [msg] * half
        return out

    @property
    def n_coeffs(self) -> int:
        return sum(self._block(v) for v in self.encoded)

    # -- conversion -----------------------------------------------------

    def encode(self, agent: AgentSpec, rho: dict[str, float] | None = None) -> PolicyEncoding:
        coeffs: list[int] = []
        for v in self.encoded:
            rule = agent.machines[v].rule
            if not isinstance(rule, LinearRingRule):
                raise ValueError(f"machine {v}: only linear ring rules can be encoded")
            parents = agent.parents(v)
            for rc, mod in ((rule.state, agent.machines[v].cardinality), (rule.message, agent.msg_cardinality)):
                cmap = dict(zip(parents, rc.c))
                c = [cmap.get(u, 0) for u in self._potential_parents(v)]
                coeffs += [rc.a % mod, *(b % mod for b in rc.b), *(x % mod for x in c), rc.d % mod]
        logits: tuple[float, ...] = ()
        if self.include_rho:
            r = normalize_allocation(rho or uniform_allocation())
            logits = _canonical_logits([math.log(max(r[k], 1e-300)) for k in PARAMETERS])
        edges: tuple[int, ...] = ()
        if self.edge_bits:
            present = set(agent.graph.edges)
            edges = tuple(int(uv in present) for uv in self.edge_pairs)
        return PolicyEncoding(tuple(coeffs), logits, edges)

    def decode(self, enc: PolicyEncoding) -> tuple[AgentSpec, dict[str, float] | None]:
        base = self.base
        if len(enc.coeffs) != self.n_coeffs:
            raise ValueError("coefficient vector has the wrong length")
        if self.edge_bits:
            if len(enc.edges) != len(self.edge_pairs):
                raise ValueError("edge mask has the wrong length")
            encoded = set(self.encoded)
            kept = [e for e in base.graph.edges if e[1] not in encoded]
            kept += [uv for uv, bit in zip(self.edge_pairs, enc.edges) if bit]
            graph = MessageGraph(base.n, tuple(sorted(kept)), base.graph.max_fanout)
        else:
            graph = base.graph
        machines = list(base.machines)
        pos = 0
        n_ext = len(base.ext_cards)
        for v in self.encoded:
            pot = self._potential_parents(v)
            parents = graph.parents(v)
            rcs = []
            for _ in range(2):
                a = enc.coeffs[pos]
                b = tuple(enc.coeffs[pos + 1 : pos + 1 + n_ext])
                c_all = dict(zip(pot, enc.coeffs[pos + 1 + n_ext : pos + 1 + n_ext + len(pot)]))
                d = enc.coeffs[pos + 1 + n_ext + len(pot)]
                rcs.append(RingCoeffs(int(a), tuple(int(x) for x in b), tuple(int(c_all.get(u, 0)) for u in parents), int(d)))
                pos += 2 + n_ext + len(pot)
            machines[v] = replace(machines[v], rule=LinearRingRule(rcs[0], rcs[1]))
        agent = replace(base, machines=tuple(machines), graph=graph)
        rho = softmax(enc.logits) if self.include_rho else None
        return agent, rho

    # -- search moves ---------------------------------------------------

    def random(self, rng: np.random.Generator) -> PolicyEncoding:
        coeffs = tuple(int(rng.integers(m)) for m in self.moduli())
        logits = _canonical_logits(rng.normal(size=len(PARAMETERS))) if self.include_rho else ()
        edges: tuple[int, ...] = ()
        if self.edge_bits:
            bits = [int(b) for b in rng.integers(0, 2, size=len(self.edge_pairs))]
            edges = self._repair(bits)
        return PolicyEncoding(coeffs, logits, edges)

    def _repair(self, bits: list[int]) -> tuple[int, ...]:
        cap = self.base.graph.max_fanout
        if cap is None:
            return tuple(bits)
        out_deg = [self.base.graph.out_degree(u) for u in range(self.base.n)]
        encoded = set(self.encoded)
        for u, v in self.base.graph.edges:
            if v in encoded:
                out_deg[u] -= 1
        # drop highest-index children first
        order = sorted(range(len(bits)), key=lambda i: self.edge_pairs[i][1])
        for i in order:
            if bits[i]:
                u = self.edge_pairs[i][0]
                out_deg[u] += 1
        for i in reversed(order):
            u = self.edge_pairs[i][0]
            if bits[i] and out_deg[u] > cap:
                bits[i] = 0
                out_deg[u] -= 1
        return tuple(bits)

    def _fits(self, edges: Sequence[int]) -> bool:
        return self._repair(list(edges)) == tuple(edges)

    def neighbor(self, enc: PolicyEncoding, rng: np.random.Generator, logit_step: float = 1.0) -> PolicyEncoding:
        """Perturb a single coordinate."""
        n_c, n_l, n_e = len(enc.coeffs), len(enc.logits), len(enc.edges)
        i = int(rng.integers(n_c + n_l + n_e))
        if i < n_c:
            mod = self.moduli()[i]
            delta = 1 if rng.random() < 0.5 else -1
            coeffs = list(enc.coeffs)
            coeffs[i] = (coeffs[i] + delta) % mod
            return replace(enc, coeffs=tuple(coeffs))
        if i < n_c + n_l:
            logits = list(enc.logits)
            logits[i - n_c] += float(rng.normal(scale=logit_step))
            return replace(enc, logits=_canonical_logits(logits))
        edges = list(enc.edges)
        j = i - n_c - n_l
        edges[j] = 1 - edges[j]
        if not self._fits(edges):
            return enc
        return replace(enc, edges=tuple(edges))


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectiveSpec:
    horizon: int = 1
    gamma: float = 1.0
    harvest: HarvestSpec = field(default_factory=HarvestSpec)
    policy: EvolutionPolicy = field(default_factory=EvolutionPolicy.noop)
    init: object = "uniform"
    myopic: bool = False
    limit: int = DEFAULT_ENUMERATION_LIMIT

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError("gamma must lie in [0, 1]")

    @property
    def effective_horizon(self) -> int:
        return 1 if self.myopic else self.horizon


def evaluate_agents(society: AgentSpec, environment: AgentSpec, objective: ObjectiveSpec,
                    rho: dict[str, float] | None, seeds: SeedPlan) -> float:
    """Discounted GFER sum ``sum_t gamma^t GFER_t`` over the objective's horizon."""
    pop = initial_population(society, environment, objective.init, objective.harvest, seeds, objective.limit)
    policy = objective.policy
    rho = normalize_allocation(rho or policy.allocation)
    store = None if objective.harvest.store is None else Fraction(objective.harvest.store)
    state = SimState(society, environment, pop, store, rho)
    settings = StepSettings(objective.harvest, policy, seeds, objective.limit)
    total = 0.0
    for t in range(objective.effective_horizon):
        state, rec = step(state, settings, rho_override=rho)
        weight = 1.0 if t == 0 else objective.gamma**t
        if weight:
            total += weight * rec["gfer_effective"]
    return total


def evaluate_policy(enc: PolicyEncoding, space: EncodingSpace, environment: AgentSpec,
                    objective: ObjectiveSpec, seeds: SeedPlan) -> float:
    """Score of an encoded society; invalid decodes score ``-inf``."""
    try:
        society, rho = space.decode(enc)
    except (ValueError, IndexError):
        return INVALID
    if not validate_agent(society).ok:
        return INVALID
    return evaluate_agents(society, environment, objective, rho, seeds)


@dataclass
class OptimizeResult:
    encoding: PolicyEncoding
    score: float
    history: list[dict]

    def best_curve(self) -> list[float]:
        out, best = [], -math.inf
        for h in self.history:
            best = max(best, h["score"])
            out.append(best)
        return out


def inner_optimize(
    space: EncodingSpace,
    environment: AgentSpec,
    objective: ObjectiveSpec,
    budget: int,
    rng: np.random.Generator,
    *,
    seeds: SeedPlan | None = None,
    patience: int | None = None,
    round_id: int = 0,
    start: PolicyEncoding | None = None,
) -> OptimizeResult:
    """Random-restart hill climbing over ``space``.

    Every candidate is scored with the same seed plan (common random
    numbers).  A climb restarts from a fresh uniform draw after ``patience``
    non-improving neighbours.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    seeds = seeds or SeedPlan(int(rng.integers(2**63)))
    dim = space.n_coeffs + (len(PARAMETERS) if space.include_rho else 0) + len(space.edge_pairs)
    patience = patience if patience is not None else max(4, 2 * dim)
    history: list[dict] = []
    best_enc, best = None, -math.inf
    cache: dict[PolicyEncoding, float] = {}

    def score(enc):
        if enc not in cache:
            cache[enc] = evaluate_policy(enc, space, environment, objective, seeds)
        return cache[enc]

    evals = 0
    first = True
    while evals < budget:
        cur = start if (first and start is not None) else space.random(rng)
        first = False
        cur_s = score(cur)
        evals += 1
        history.append({"round": round_id, "candidate": evals - 1, "score": cur_s, "accepted": True})
        if cur_s > best:
            best_enc, best = cur, cur_s
        stall = 0
        while evals < budget and stall < patience:
            nb = space.neighbor(cur, rng)
            s = score(nb)
            evals += 1
            ok = s > cur_s
            history.append({"round": round_id, "candidate": evals - 1, "score": s, "accepted": ok})
            if ok:
                cur, cur_s, stall = nb, s, 0
                if s > best:
                    best_enc, best = nb, s
            else:
                stall += 1
    return OptimizeResult(best_enc, best, history)


# --------------------------------------------------------------------------
# environments
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvironmentFamily:
    n: int
    cardinality: int = 2
    msg_cardinality: int = 2
    edge_p: float = 0.0
    tau: int = 1
    sigma: float = 0.0
    ext_cards: tuple[int, ...] = (2,)

    def __post_init__(self):
        if not (0.0 <= self.edge_p <= 1.0):
            raise ValueError("edge probability must lie in [0, 1]")


def random_ring_agent(family: EnvironmentFamily, rng: np.random.Generator) -> AgentSpec:
    n = family.n
    mask = rng.random((n, n)) < family.edge_p
    np.fill_diagonal(mask, False)
    edges = tuple((int(u), int(v)) for u, v in zip(*np.nonzero(mask)))
    graph = MessageGraph(n, edges)
    machines = []
    for v in range(n):
        k = len(graph.parents(v))
        rcs = []
        for mod in (family.cardinality, family.msg_cardinality):
            rcs.append(RingCoeffs(
                int(rng.integers(mod)),
                tuple(int(x) for x in rng.integers(mod, size=len(family.ext_cards))),
                tuple(int(x) for x in rng.integers(mod, size=k)),
                int(rng.integers(mod)),
            ))
        machines.append(MachineSpec(family.cardinality, LinearRingRule(*rcs)))
    return AgentSpec(tuple(machines), graph, tau=family.tau, msg_cardinality=family.msg_cardinality,
                     sigma=family.sigma, ext_cards=family.ext_cards)


def outer_random(family: EnvironmentFamily, samples: int, rng: np.random.Generator) -> list[AgentSpec]:
    """Seeded environments with ER message graphs and uniformly random ring rules."""
    return [random_ring_agent(family, rng) for _ in range(samples)]


def responsiveness(
    environment: AgentSpec,
    *,
    R: int = 100_000,
    limit: int = DEFAULT_ENUMERATION_LIMIT,
    seeds: SeedPlan | None = None,
) -> float:
    """``I(X'; e | X)`` in bits for one iteration under uniform probes of ``X`` and ``e``.

    ``X'`` is the state after ``tau`` timesteps with ``e`` frozen and the
    inbox starting at zero.  Exact when the probe space fits in ``limit``
    rows, Monte Carlo with ``R`` probes otherwise.
    """
    ca = compile_agent(environment)
    cards = list(environment.cardinalities) + list(environment.ext_cards)
    total = math.prod(cards)
    n = environment.n
    exact = total <= limit
    if exact:
        grid = np.indices(cards).reshape(len(cards), -1).T.astype(np.int64)
        w = np.full(total, 1.0 / total)
    else:
        seeds = seeds or SeedPlan(0)
        cols = [np.minimum((seeds.uniforms((KERNEL, 0, 9, i), R) * k).astype(np.int64), k - 1) for i, k in enumerate(cards)]
        grid = np.stack(cols, axis=1)
        w = np.full(R, 1.0 / R)
    rows = _Rows(w, x0=grid[:, :n].copy(), e=grid[:, n:].copy(), x=grid[:, :n].copy(),
                 b=ca.empty_inbox(len(w)), t=ca.empty_tapes(len(w)))
    try:
        _run_agent_rows(rows, ca, "x", "e", "b", "t" if ca.ledgers else None, environment.tau, exact,
                        seeds, (KERNEL, 0, SOCIETY), 0, limit if exact else 0, None)
    except EnumerationLimitError:
        return responsiveness(environment, R=R, limit=0, seeds=seeds)
    return conditional_mi(rows.f["x0"], rows.f["e"], rows.f["x"], rows.w)


def _ids(arr: np.ndarray) -> np.ndarray:
    arr = arr.reshape(arr.shape[0], -1)
    if arr.shape[1] == 0:
        return np.zeros(arr.shape[0], dtype=np.int64)
    return np.unique(arr, axis=0, return_inverse=True)[1].reshape(-1)


def conditional_mi(x: np.ndarray, e: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """``I(Y; E | X)`` in bits from weighted rows."""
    xi, ei, yi = _ids(x), _ids(e), _ids(y)
    total = 0.0
    for xv in np.unique(xi):
        sel = xi == xv
        px = w[sel].sum()
        if px <= 0:
            continue
        mat = np.zeros((ei[sel].max() + 1, yi[sel].max() + 1))
        np.add.at(mat, (ei[sel], yi[sel]), w[sel])
        total += px * mutual_information_bits(mat)
    return max(0.0, total)


@dataclass
class AdversarialResult:
    environment: AgentSpec
    society: PolicyEncoding
    trace: list[dict]
    infeasible: bool = False


def outer_adversarial(
    environment: AgentSpec,
    space: EncodingSpace,
    objective: ObjectiveSpec,
    rounds: int,
    epsilon: float,
    rng: np.random.Generator,
    *,
    inner_budget: int = 200,
    adversary_budget: int = 50,
    responsiveness_R: int = 20_000,
) -> AdversarialResult:
    """Best-response alternation between the society and a minimising environment.

    Round 0 is a plain :func:`inner_optimize` against ``environment``; every
    later round first hill-climbs the environment's ring coefficients to
    lower the current society's score, rejecting candidates whose
    responsiveness is below ``epsilon``, then re-optimises the society.
    Within a round the adversary only accepts strict decreases, all scored
    with the same seed plan.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    env_space = EncodingSpace(environment, include_rho=False)
    env_enc = env_space.encode(environment)
    feasible = responsiveness(environment, R=responsiveness_R) >= epsilon
    best_feasible = environment if feasible else None
    trace: list[dict] = []
    soc_enc = None
    for r in range(rounds):
        seeds = SeedPlan(int(rng.integers(2**63)))
        if r > 0:
            soc, rho = space.decode(soc_enc)
            value = evaluate_agents(soc, environment, objective, rho, seeds)
            moves = [value]
            for _ in range(adversary_budget):
                cand_enc = env_space.neighbor(env_enc, rng)
                cand, _ = env_space.decode(cand_enc)
                if responsiveness(cand, R=responsiveness_R) < epsilon:
                    continue
                v = evaluate_agents(soc, cand, objective, rho, seeds)
                if v < value or not feasible:
                    environment, env_enc, value = cand, cand_enc, v
                    feasible = True
                    best_feasible = environment
                    moves.append(v)
            trace.append({"round": r, "phase": "adversary", "value": value, "moves": moves})
        res = inner_optimize(space, environment, objective, inner_budget, rng, seeds=seeds, round_id=r,
                             start=soc_enc)
        soc_enc = res.encoding
        trace.append({"round": r, "phase": "society", "value": res.score})
    final = best_feasible if best_feasible is not None else environment
    return AdversarialResult(final, soc_enc, trace, infeasible=best_feasible is None)
