"""Timestep, iteration and ensemble execution of the two-agent loop.

Everything runs on *batches*: ``R`` rows of joint state advanced in lockstep
with numpy.  The same code path serves three uses:

* a single trajectory (``R = 1``), which is what :func:`run_timestep` and
  :func:`run_iteration` expose;
* a sampled ensemble of replicates, each with its own slice of the seeded
  uniform streams;
* exact enumeration, where rows carry probability weights and every channel
  outcome and kernel branch becomes its own row (identical rows are merged).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from coevo.channel import ObservationChannel, observe_batch
from coevo.core import (
    FILL_SYMBOL,
    LEDGER,
    READ,
    STORE,
    WRITE,
    AgentSpec,
    ContractViolation,
    FunctionRule,
    KernelRule,
    LinearRingRule,
    TableRule,
    domain_size,
)

DEFAULT_ENUMERATION_LIMIT = 1 << 20

# stream purposes for SeedPlan coordinates
KERNEL, CHANNEL, INIT, EVOLVE, OPTIMIZE, HARVEST = range(6)
SOCIETY, ENVIRONMENT = 0, 1


class EnumerationLimitError(RuntimeError):
    pass


@dataclass(frozen=True)
class SeedPlan:
    """Counter-based stream splitting keyed on integer coordinates.

    Coordinates are ``(purpose, iteration, agent, machine, ...)``.  Batched
    draws hand element ``r`` to replicate ``r``, so a replicate sees the same
    numbers whatever the ensemble size.
    """

    master: int

    def generator(self, *coords: int) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.master), spawn_key=tuple(int(c) for c in coords))
        return np.random.Generator(np.random.PCG64(ss))

    def uniforms(self, coords: Sequence[int], size: int, offset: int = 0) -> np.ndarray:
        return self.generator(*coords).random(offset + size)[offset:]


# --------------------------------------------------------------------------
# compiled agents
# --------------------------------------------------------------------------


def _mixed_radix(cols: Sequence[np.ndarray], radices: Sequence[int], n_rows: int) -> np.ndarray:
    idx = np.zeros(n_rows, dtype=np.int64)
    mult = 1
    for col, k in zip(cols, radices):
        idx += col * mult
        mult *= k
    return idx


class _CompiledMachine:
    def __init__(self, agent: AgentSpec, v: int, slots: np.ndarray, store_parent_slots: np.ndarray):
        machine = agent.machines[v]
        self.v = v
        self.card = machine.cardinality
        self.role = machine.role
        self.rule = machine.rule
        self.slots = slots
        self.store_parent_slots = store_parent_slots
        self.msg_card = agent.msg_cardinality
        self.kind = "ledger" if machine.role == LEDGER else type(machine.rule).__name__
        rule = machine.rule
        if isinstance(rule, (TableRule, KernelRule)):
            self.ext_indices = list(rule.ext_indices)
            self.ext_radices = [agent.ext_cards[i] for i in rule.ext_indices]
            n_pa = len(slots)
            size = domain_size(self.card, self.ext_radices, self.msg_card, n_pa)
            self.radices = [self.card, *self.ext_radices, *([self.msg_card] * n_pa)]
            if isinstance(rule, TableRule):
                self.lut_x = np.zeros(size, dtype=np.int64)
                self.lut_m = np.zeros(size, dtype=np.int64)
                self.defined = np.zeros(size, dtype=bool)
                for (x, e, inbox), (xn, m) in rule.table.items():
                    i = self._flat(x, e, inbox)
                    self.lut_x[i], self.lut_m[i], self.defined[i] = xn, m, True
            else:
                width = max((len(r) for r in rule.rows.values()), default=1)
                self.k_probs = np.zeros((size, width))
                self.k_cum = np.full((size, width), 2.0)
                self.k_x = np.zeros((size, width), dtype=np.int64)
                self.k_m = np.zeros((size, width), dtype=np.int64)
                self.k_last = np.zeros(size, dtype=np.int64)
                self.defined = np.zeros(size, dtype=bool)
                for (x, e, inbox), outcomes in rule.rows.items():
                    i = self._flat(x, e, inbox)
                    acc = 0.0
                    for j, ((xn, m), p) in enumerate(outcomes):
                        acc += p
                        self.k_probs[i, j] = p
                        self.k_cum[i, j] = acc
                        self.k_x[i, j], self.k_m[i, j] = xn, m
                        if p > 0:
                            self.k_last[i] = j
                    self.defined[i] = True

    def _flat(self, x, e, inbox) -> int:
        idx, mult = 0, 1
        for val, k in zip((x, *e, *inbox), self.radices):
            idx += val * mult
            mult *= k
        return idx

    def key_index(self, x: np.ndarray, e: np.ndarray, inbox: np.ndarray) -> np.ndarray:
        cols = [x] + [e[:, i] for i in self.ext_indices] + [inbox[:, j] for j in range(inbox.shape[1])]
        idx = _mixed_radix(cols, self.radices, x.shape[0])
        if not self.defined[idx].all():
            raise ContractViolation(f"machine {self.v}: update rule has no row for some input")
        return idx

    def rule_x(self, x: np.ndarray) -> np.ndarray:
        # stores hold counts that may exceed the nominal cardinality
        return np.minimum(x, self.card - 1) if self.role == STORE else x

    def evaluate(self, x, e, inbox, choice=None) -> tuple[np.ndarray, np.ndarray]:
        rule = self.rule
        xr = self.rule_x(x)
        if isinstance(rule, TableRule):
            idx = self.key_index(xr, e, inbox)
            return self.lut_x[idx], self.lut_m[idx]
        if isinstance(rule, LinearRingRule):
            return (
                np.asarray(rule.state.evaluate(xr, e, inbox, self.card), dtype=np.int64),
                np.asarray(rule.message.evaluate(xr, e, inbox, self.msg_card), dtype=np.int64),
            )
        if isinstance(rule, FunctionRule):
            xs, ms = rule.fn(xr, e, inbox)
            return np.asarray(xs, dtype=np.int64), np.asarray(ms, dtype=np.int64)
        if isinstance(rule, KernelRule):
            idx = self.key_index(xr, e, inbox)
            return self.k_x[idx, choice], self.k_m[idx, choice]
        raise ContractViolation(f"machine {self.v}: no evaluable rule")

    def sample_choice(self, x, e, inbox, u: np.ndarray) -> np.ndarray:
        idx = self.key_index(self.rule_x(x), e, inbox)
        j = (self.k_cum[idx] <= u[:, None]).sum(axis=1)
        return np.minimum(j, self.k_last[idx])

    def branch_probs(self, x, e, inbox) -> np.ndarray:
        idx = self.key_index(self.rule_x(x), e, inbox)
        return self.k_probs[idx]


class CompiledAgent:
    """Slot layout and per-machine evaluators for one :class:`AgentSpec`.

    Inbox buffers are a single ``(R, n_edges)`` array; edges are ordered by
    (target, source) so each machine's parent slots are contiguous and in
    parent-index order.
    """

    def __init__(self, agent: AgentSpec):
        self.agent = agent
        self.n = agent.n
        edges = sorted(set(agent.graph.edges), key=lambda uv: (uv[1], uv[0]))
        self.edges = edges
        self.src = np.array([u for u, _ in edges], dtype=np.int64)
        self.dst = np.array([v for _, v in edges], dtype=np.int64)
        self.slot = {uv: i for i, uv in enumerate(edges)}
        roles = [m.role for m in agent.machines]
        self.ledgers = [v for v, r in enumerate(roles) if r == LEDGER]
        self.ledger_pos = {v: i for i, v in enumerate(self.ledgers)}
        self.stores = [v for v, r in enumerate(roles) if r == STORE]
        self.store_edge_slots = np.array(
            [i for i, (u, v) in enumerate(edges) if roles[u] == STORE and roles[v] == STORE], dtype=np.int64
        )
        self.cards = np.array(agent.cardinalities, dtype=np.int64)
        self.machines: list[_CompiledMachine] = []
        for v in range(self.n):
            slots = np.array([self.slot[(u, v)] for u in agent.parents(v)], dtype=np.int64)
            store_slots = np.array(
                [self.slot[(u, v)] for u in agent.parents(v) if roles[u] == STORE and roles[v] == STORE],
                dtype=np.int64,
            )
            self.machines.append(_CompiledMachine(agent, v, slots, store_slots))
        self.kernels = [v for v in range(self.n) if isinstance(agent.machines[v].rule, KernelRule)]
        self.store_children = np.array(
            [sum(1 for c in agent.graph.children(v) if roles[c] == STORE) if roles[v] == STORE else 0 for v in range(self.n)],
            dtype=np.int64,
        )

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def observable(self, states: np.ndarray) -> np.ndarray:
        """States as seen through a channel: store counts saturate at cardinality - 1."""
        return np.minimum(states, self.cards - 1) if self.stores else states

    def step(self, states, inbox, e, tapes, choices: Mapping[int, np.ndarray]):
        """Synchronous update of all machines against the pre-step snapshot."""
        R = states.shape[0]
        agent = self.agent
        new_states = states.copy()
        out_msg = np.zeros((R, self.n), dtype=np.int64)
        new_tapes = tapes.copy() if tapes is not None else None
        ledger_replies: dict[int, np.ndarray] = {}
        for v, cm in enumerate(self.machines):
            box = inbox[:, cm.slots] if len(cm.slots) else np.zeros((R, 0), dtype=np.int64)
            if cm.kind == "ledger":
                replies = np.zeros((R, len(cm.slots)), dtype=np.int64)
                tape = new_tapes[:, self.ledger_pos[v], :]
                A = agent.ledger_addresses
                rows = np.arange(R)
                for j in range(len(cm.slots)):
                    m = box[:, j]
                    op = m % 4
                    addr = (m // 4) % A
                    sym = m // (4 * A)
                    w = op == WRITE
                    tape[rows[w], addr[w]] = sym[w]
                    r = op == READ
                    replies[:, j] = np.where(r, tape[rows, addr], FILL_SYMBOL)
                ledger_replies[v] = replies
                out_msg[:, v] = FILL_SYMBOL
                continue
            x = states[:, v]
            xn, m = cm.evaluate(x, e, box, choices.get(v))
            if cm.role == STORE:
                credit = inbox[:, cm.store_parent_slots].sum(axis=1) if len(cm.store_parent_slots) else 0
                available = x + credit
                k = self.store_children[v]
                ok = m * k <= available
                m = np.where(ok, m, 0)
                new_states[:, v] = available - m * k
            else:
                new_states[:, v] = xn
            out_msg[:, v] = m
        new_inbox = out_msg[:, self.src] if self.n_edges else np.zeros((R, 0), dtype=np.int64)
        for v, replies in ledger_replies.items():
            parents = agent.parents(v)
            for c in agent.graph.children(v):
                s = self.slot[(v, c)]
                new_inbox[:, s] = replies[:, parents.index(c)] if c in parents else FILL_SYMBOL
        return new_states, new_inbox, new_tapes, out_msg

    def settle(self, states: np.ndarray, inbox: np.ndarray) -> np.ndarray:
        """Credit in-flight store-to-store transfers before inboxes are reset."""
        if not len(self.store_edge_slots):
            return states
        states = states.copy()
        for s in self.store_edge_slots:
            states[:, self.dst[s]] += inbox[:, s]
        return states

    def empty_inbox(self, R: int) -> np.ndarray:
        return np.zeros((R, self.n_edges), dtype=np.int64)

    def empty_tapes(self, R: int) -> np.ndarray:
        return np.zeros((R, len(self.ledgers), self.agent.ledger_addresses), dtype=np.int64)


_COMPILE_CACHE: dict[int, tuple[AgentSpec, CompiledAgent]] = {}


def compile_agent(agent: AgentSpec) -> CompiledAgent:
    hit = _COMPILE_CACHE.get(id(agent))
    if hit is not None and hit[0] is agent:
        return hit[1]
    compiled = CompiledAgent(agent)
    if len(_COMPILE_CACHE) > 256:
        _COMPILE_CACHE.clear()
    _COMPILE_CACHE[id(agent)] = (agent, compiled)
    return compiled


# --------------------------------------------------------------------------
# single-trajectory API
# --------------------------------------------------------------------------


class StepResult(NamedTuple):
    states: tuple[int, ...]
    inbox: list[tuple[int, ...]]
    tapes: dict[int, tuple[int, ...]]


def inbox_from_lists(ca: CompiledAgent, inbox: Sequence[Sequence[int]] | None, R: int = 1) -> np.ndarray:
    arr = ca.empty_inbox(R)
    if inbox is None:
        return arr
    if len(inbox) != ca.n:
        raise ContractViolation(f"expected {ca.n} inbox buffers, got {len(inbox)}")
    for v, msgs in enumerate(inbox):
        parents = ca.agent.parents(v)
        if len(msgs) != len(parents):
            raise ContractViolation(f"machine {v}: inbox has {len(msgs)} messages, |pa(v)| = {len(parents)}")
        for u, m in zip(parents, msgs):
            arr[:, ca.slot[(u, v)]] = m
    return arr


def inbox_to_lists(ca: CompiledAgent, arr: np.ndarray) -> list[tuple[int, ...]]:
    return [tuple(int(arr[0, ca.slot[(u, v)]]) for u in ca.agent.parents(v)) for v in range(ca.n)]


def primed_inbox(agent: AgentSpec, states: Sequence[int]) -> list[tuple[int, ...]]:
    """Inbox in which every parent's message equals that parent's current state."""
    return [tuple(int(states[u]) for u in agent.parents(v)) for v in range(agent.n)]


def _tapes_array(ca: CompiledAgent, tapes: Mapping[int, Sequence[int]] | None) -> np.ndarray:
    arr = ca.empty_tapes(1)
    for v, tape in (tapes or {}).items():
        vals = list(tape)[: ca.agent.ledger_addresses]
        arr[0, ca.ledger_pos[v], : len(vals)] = vals
    return arr


def run_timestep(
    agent: AgentSpec,
    states: Sequence[int],
    inbox: Sequence[Sequence[int]] | None,
    e: Sequence[int],
    rng: np.random.Generator | None = None,
    tapes: Mapping[int, Sequence[int]] | None = None,
) -> StepResult:
    """Advance one agent by one synchronous timestep.

    ``inbox[v]`` lists the messages from ``pa(v)`` in parent-index order;
    ``None`` means all zeros.  Kernel machines draw one uniform each, in
    machine order, from ``rng``.
    """
    ca = compile_agent(agent)
    if len(states) != ca.n:
        raise ContractViolation(f"expected {ca.n} states, got {len(states)}")
    if len(e) != len(agent.ext_cards):
        raise ContractViolation(f"external input has {len(e)} symbols, expected {len(agent.ext_cards)}")
    st = np.asarray(states, dtype=np.int64).reshape(1, ca.n)
    ib = inbox_from_lists(ca, inbox)
    ea = np.asarray(e, dtype=np.int64).reshape(1, len(e))
    tp = _tapes_array(ca, tapes)
    choices = {}
    if ca.kernels:
        if rng is None:
            raise ContractViolation("agent has stochastic kernels; an rng is required")
        for v in ca.kernels:
            u = np.array([rng.random()])
            choices[v] = ca.machines[v].sample_choice(st[:, v], ea, ib[:, ca.machines[v].slots], u)
    ns, ni, nt, _ = ca.step(st, ib, ea, tp, choices)
    out_tapes = {v: tuple(int(s) for s in nt[0, ca.ledger_pos[v]]) for v in ca.ledgers}
    return StepResult(tuple(int(s) for s in ns[0]), inbox_to_lists(ca, ni), out_tapes)


def run_timesteps(
    agent: AgentSpec,
    states: Sequence[int] | np.ndarray,
    steps: int,
    *,
    e: Sequence[int] = (),
    inbox: Sequence[Sequence[int]] | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Trajectory of ``steps`` timesteps under a frozen ``e``; returns ``(steps + 1, R, n)``.

    ``states`` may be one joint state or an ``(R, n)`` batch of independent
    chains.  Kernel draws come from ``rng`` as one ``(R,)`` block per kernel
    machine per step, in machine order.
    """
    ca = compile_agent(agent)
    st = np.atleast_2d(np.asarray(states, dtype=np.int64))
    R = st.shape[0]
    if st.shape[1] != ca.n:
        raise ContractViolation(f"expected {ca.n} states, got {st.shape[1]}")
    ib = inbox_from_lists(ca, inbox, R)
    ea = np.tile(np.asarray(e, dtype=np.int64).reshape(1, -1), (R, 1))
    tp = ca.empty_tapes(R)
    if ca.kernels and rng is None:
        raise ContractViolation("agent has stochastic kernels; an rng is required")
    out = np.empty((steps + 1, R, ca.n), dtype=np.int64)
    out[0] = st
    for t in range(steps):
        choices = {}
        for v in ca.kernels:
            cm = ca.machines[v]
            choices[v] = cm.sample_choice(st[:, v], ea, ib[:, cm.slots], rng.random(R))
        st, ib, tp, _ = ca.step(st, ib, ea, tp, choices)
        out[t + 1] = st
    return out


@dataclass
class IterationTrace:
    iteration: int
    e_society: tuple[int, ...]
    e_environment: tuple[int, ...]
    society_states: list[tuple[int, ...]]  # tau^S + 1 rows, starting state first
    environment_states: list[tuple[int, ...]]
    society_messages: list[tuple[int, ...]]  # tau^S rows of broadcast messages
    environment_messages: list[tuple[int, ...]]
    gfer: float | None = None

    @property
    def start_society(self) -> tuple[int, ...]:
        return self.society_states[0]

    @property
    def end_society(self) -> tuple[int, ...]:
        return self.society_states[-1]

    @property
    def end_environment(self) -> tuple[int, ...]:
        return self.environment_states[-1]


# --------------------------------------------------------------------------
# batched iterations
# --------------------------------------------------------------------------


@dataclass
class Population:
    """Rows of joint state at an iteration boundary.

    ``weights`` sum to one.  ``exact`` populations are enumerations: rows are
    distinct and weights are probabilities; sampled populations hold one row
    per replicate with equal weights.
    """

    xs: np.ndarray
    xe: np.ndarray
    weights: np.ndarray
    exact: bool = False
    tapes_s: np.ndarray | None = None
    tapes_e: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.xs.shape[0]

    def copy(self) -> "Population":
        return Population(
            self.xs.copy(),
            self.xe.copy(),
            self.weights.copy(),
            self.exact,
            None if self.tapes_s is None else self.tapes_s.copy(),
            None if self.tapes_e is None else self.tapes_e.copy(),
        )


def point_population(xs: Sequence[int], xe: Sequence[int], R: int = 1, exact: bool = False) -> Population:
    rows = 1 if exact else R
    return Population(
        np.tile(np.asarray(xs, dtype=np.int64), (rows, 1)),
        np.tile(np.asarray(xe, dtype=np.int64), (rows, 1)),
        np.full(rows, 1.0 / rows),
        exact,
    )


def distribution_population(
    support: Sequence[tuple[Sequence[int], Sequence[int], float]],
    *,
    exact: bool,
    R: int = 1,
    seeds: SeedPlan | None = None,
) -> Population:
    """Population from an explicit boundary distribution ``[(xs, xe, p), ...]``.

    Exact populations keep the support as weighted rows; sampled ones draw
    ``R`` replicate boundaries with the INIT stream.
    """
    xs = np.array([list(s) for s, _, _ in support], dtype=np.int64).reshape(len(support), -1)
    xe = np.array([list(t) for _, t, _ in support], dtype=np.int64).reshape(len(support), -1)
    p = np.array([w for _, _, w in support], dtype=float)
    if abs(p.sum() - 1.0) > 1e-9 or (p < 0).any():
        raise ValueError("boundary distribution must be a probability vector")
    if exact:
        keep = p > 0
        return Population(xs[keep], xe[keep], p[keep] / p[keep].sum(), True)
    seeds = seeds or SeedPlan(0)
    u = seeds.uniforms((INIT, 0, 0, 0), R)
    idx = np.minimum(np.searchsorted(np.cumsum(p), u, side="right"), len(p) - 1)
    return Population(xs[idx], xe[idx], np.full(R, 1.0 / R), False)


def uniform_population(
    society: AgentSpec, environment: AgentSpec, *, exact: bool, R: int = 1, seeds: SeedPlan | None = None,
    limit: int = DEFAULT_ENUMERATION_LIMIT,
) -> Population:
    """Independent uniform draw over every machine state of both agents."""
    cards = list(society.cardinalities) + list(environment.cardinalities)
    if exact:
        total = math.prod(cards)
        if total > limit:
            raise EnumerationLimitError(f"uniform boundary needs {total} rows, limit is {limit}")
        grids = np.indices(cards).reshape(len(cards), -1).T.astype(np.int64)
        return Population(
            grids[:, : society.n].copy(), grids[:, society.n :].copy(), np.full(total, 1.0 / total), True
        )
    seeds = seeds or SeedPlan(0)
    cols = []
    for i, k in enumerate(cards):
        u = seeds.uniforms((INIT, 0, 1, i), R)
        cols.append(np.minimum((u * k).astype(np.int64), k - 1))
    arr = np.stack(cols, axis=1) if cols else np.zeros((R, 0), dtype=np.int64)
    return Population(arr[:, : society.n].copy(), arr[:, society.n :].copy(), np.full(R, 1.0 / R), False)


class _Rows:
    """Named per-row arrays that expand and merge together."""

    def __init__(self, weights: np.ndarray, **fields: np.ndarray):
        self.w = weights
        self.f = {k: v for k, v in fields.items()}

    @property
    def size(self) -> int:
        return self.w.shape[0]

    def expand(self, probs: np.ndarray, set_field: str | None = None, set_col: int | None = None, limit: int = 0):
        """Replace each row by ``probs.shape[1]`` rows weighted by ``probs``.

        When ``set_field`` is given, column ``set_col`` of that field receives
        the branch index; the branch index array is returned as well.
        """
        R, J = probs.shape
        rows = np.repeat(np.arange(R), J)
        branch = np.tile(np.arange(J), R)
        w = self.w[rows] * probs.reshape(-1)
        keep = w > 0
        rows, branch, w = rows[keep], branch[keep], w[keep]
        if limit and len(rows) > limit:
            raise EnumerationLimitError(f"exact enumeration needs {len(rows)} rows, limit is {limit}")
        self.w = w
        self.f = {k: v[rows] for k, v in self.f.items()}
        if set_field is not None:
            self.f[set_field] = self.f[set_field].copy()
            self.f[set_field][:, set_col] = branch
        return branch

    def merge(self, exclude: Sequence[str] = ()):
        names = [k for k in self.f if k not in exclude]
        if not names or self.size <= 1:
            return
        mats = [self.f[k].reshape(self.size, -1) for k in names]
        widths = [m.shape[1] for m in mats]
        big = np.concatenate(mats, axis=1) if sum(widths) else np.zeros((self.size, 1), dtype=np.int64)
        uniq, inv = np.unique(big, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        if len(uniq) == self.size:
            return
        w = np.bincount(inv, weights=self.w, minlength=len(uniq))
        shapes = {k: self.f[k].shape[1:] for k in names}
        out, start = {}, 0
        for k, wd in zip(names, widths):
            out[k] = uniq[:, start : start + wd].reshape((len(uniq),) + shapes[k]).astype(np.int64)
            start += wd
        self.w = w
        self.f = out


@dataclass
class IterationOutcome:
    """Rows of one iteration: starting snapshot, observations and end state."""

    xs0: np.ndarray
    xe0: np.ndarray
    es: np.ndarray
    ee: np.ndarray
    xs: np.ndarray
    xe: np.ndarray
    weights: np.ndarray
    exact: bool
    tapes_s: np.ndarray | None = None
    tapes_e: np.ndarray | None = None
    trace_s: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    trace_e: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def next_population(self) -> Population:
        pop = Population(self.xs, self.xe, self.weights, self.exact, self.tapes_s, self.tapes_e)
        if self.exact:
            rows = _Rows(self.weights, xs=self.xs, xe=self.xe, ts=_or_empty(self.tapes_s, self.xs.shape[0]),
                         te=_or_empty(self.tapes_e, self.xs.shape[0]))
            rows.merge()
            pop = Population(rows.f["xs"], rows.f["xe"], rows.w, True,
                             _none_if_empty(rows.f["ts"]), _none_if_empty(rows.f["te"]))
        return pop


def _or_empty(arr, R):
    return arr if arr is not None else np.zeros((R, 0, 0), dtype=np.int64)


def _none_if_empty(arr):
    return None if arr.size == 0 and arr.ndim == 3 and arr.shape[1] == 0 else arr


def _channel_for(observer: AgentSpec, override: ObservationChannel | None) -> ObservationChannel:
    if override is not None:
        return override
    return ObservationChannel(observer.sigma, observer.ext_cards)


def project_observation(states: np.ndarray, ext_cards: Sequence[int]) -> np.ndarray:
    """Map the observed agent's joint state onto the observer's external alphabet.

    Components beyond the observed agent's size read as 0, surplus components
    are dropped, and symbols are reduced modulo the observer's alphabet.  When
    the observer's ``ext_cards`` equal the observed cardinalities this is the
    identity.
    """
    R, n = states.shape
    k = len(ext_cards)
    out = np.zeros((R, k), dtype=np.int64)
    m = min(n, k)
    if m:
        out[:, :m] = states[:, :m] % np.asarray(ext_cards[:m], dtype=np.int64)
    return out


def _observe_rows(rows: _Rows, src: str, dst: str, ca_src: CompiledAgent, channel: ObservationChannel,
                  exact: bool, seeds: SeedPlan | None, coords: tuple[int, ...], replicate_offset: int,
                  limit: int):
    observed = project_observation(ca_src.observable(rows.f[src]), channel.alphabet)
    if not exact:
        R = rows.size
        n = observed.shape[1]
        if channel.sigma == 0.0 or n == 0:
            rows.f[dst] = observed.copy()
            return
        u_rep = np.stack([seeds.uniforms(coords + (i, 0), R, replicate_offset) for i in range(n)], axis=1)
        u_sym = np.stack([seeds.uniforms(coords + (i, 1), R, replicate_offset) for i in range(n)], axis=1)
        rows.f[dst] = observe_batch(observed, channel, u_rep, u_sym)
        return
    rows.f[dst] = observed.copy()
    if channel.sigma == 0.0:
        return
    for i, k in enumerate(channel.alphabet):
        if k <= 1:
            continue
        true = rows.f[dst][:, i]
        probs = np.full((rows.size, k), channel.sigma / k)
        probs[np.arange(rows.size), true] += 1.0 - channel.sigma
        rows.expand(probs, set_field=dst, set_col=i, limit=limit)
        rows.merge()


def _run_agent_rows(rows: _Rows, ca: CompiledAgent, state: str, ext: str, box: str, tape: str | None,
                    tau: int, exact: bool, seeds: SeedPlan | None, coords: tuple[int, ...],
                    replicate_offset: int, limit: int, record: list | None):
    for t in range(tau):
        choices = {}
        for v in ca.kernels:
            cm = ca.machines[v]
            x = rows.f[state][:, v]
            b = rows.f[box][:, cm.slots]
            if exact:
                probs = cm.branch_probs(x, rows.f[ext], b)
                tmp = "_branch"
                rows.f[tmp] = np.zeros((rows.size, 1), dtype=np.int64)
                rows.expand(probs, set_field=tmp, set_col=0, limit=limit)
                for pv in list(choices):
                    choices[pv] = rows.f[f"_choice{pv}"][:, 0]
                rows.f[f"_choice{v}"] = rows.f.pop(tmp)
                choices[v] = rows.f[f"_choice{v}"][:, 0]
            else:
                u = seeds.uniforms(coords + (v, t), rows.size, replicate_offset)
                choices[v] = cm.sample_choice(x, rows.f[ext], b, u)
        tp = rows.f[tape] if tape else None
        ns, ni, nt, msgs = ca.step(rows.f[state], rows.f[box], rows.f[ext], tp, choices)
        rows.f[state], rows.f[box] = ns, ni
        if tape:
            rows.f[tape] = nt
        for v in ca.kernels:
            rows.f.pop(f"_choice{v}", None)
        if record is not None:
            record.append((ns.copy(), msgs.copy()))
        if exact:
            rows.merge()
    rows.f[state] = ca.settle(rows.f[state], rows.f[box])


def iterate(
    society: AgentSpec,
    environment: AgentSpec,
    population: Population,
    *,
    seeds: SeedPlan | None = None,
    iteration: int = 0,
    channels: tuple[ObservationChannel, ObservationChannel] | None = None,
    limit: int = DEFAULT_ENUMERATION_LIMIT,
    replicate_offset: int = 0,
    record: bool = False,
) -> IterationOutcome:
    """Run one iteration of the two-agent loop on every row of ``population``.

    External inputs are drawn once from the boundary states and then frozen;
    inboxes start at message 0.  The society is advanced first, then the
    environment; they exchange nothing mid-iteration so the order is moot.
    """
    exact = population.exact
    if not exact and seeds is None:
        raise ValueError("sampled iterations need a SeedPlan")
    ca_s, ca_e = compile_agent(society), compile_agent(environment)
    ch_s = _channel_for(society, channels[0] if channels else None)
    ch_e = _channel_for(environment, channels[1] if channels else None)
    R = population.size
    ts = population.tapes_s if population.tapes_s is not None else ca_s.empty_tapes(R)
    te = population.tapes_e if population.tapes_e is not None else ca_e.empty_tapes(R)
    rows = _Rows(
        population.weights.copy(),
        xs0=population.xs, xe0=population.xe, xs=population.xs.copy(), xe=population.xe.copy(),
        es=np.zeros((R, len(ch_s.alphabet)), dtype=np.int64), ee=np.zeros((R, len(ch_e.alphabet)), dtype=np.int64),
        bs=ca_s.empty_inbox(R), be=ca_e.empty_inbox(R), ts=ts, te=te,
    )
    _observe_rows(rows, "xe", "es", ca_e, ch_s, exact, seeds, (CHANNEL, iteration, SOCIETY), replicate_offset, limit)
    _observe_rows(rows, "xs", "ee", ca_s, ch_e, exact, seeds, (CHANNEL, iteration, ENVIRONMENT), replicate_offset, limit)
    rec_s: list | None = [] if record else None
    rec_e: list | None = [] if record else None
    _run_agent_rows(rows, ca_s, "xs", "es", "bs", "ts" if ca_s.ledgers else None, society.tau, exact, seeds,
                    (KERNEL, iteration, SOCIETY), replicate_offset, limit, rec_s)
    _run_agent_rows(rows, ca_e, "xe", "ee", "be", "te" if ca_e.ledgers else None, environment.tau, exact, seeds,
                    (KERNEL, iteration, ENVIRONMENT), replicate_offset, limit, rec_e)
    f = rows.f
    return IterationOutcome(
        f["xs0"], f["xe0"], f["es"], f["ee"], f["xs"], f["xe"], rows.w, exact,
        f["ts"] if ca_s.ledgers else None, f["te"] if ca_e.ledgers else None,
        rec_s or [], rec_e or [],
    )


def run_iteration(
    society: AgentSpec,
    environment: AgentSpec,
    boundary: tuple[Sequence[int], Sequence[int]],
    seeds: SeedPlan,
    *,
    iteration: int = 0,
    channels: tuple[ObservationChannel, ObservationChannel] | None = None,
    replicate: int = 0,
) -> IterationTrace:
    """One iteration from a point boundary, with the full per-timestep trace."""
    xs, xe = boundary
    if len(xs) != society.n or len(xe) != environment.n:
        raise ContractViolation("boundary state sizes do not match the agents")
    pop = point_population(xs, xe, 1)
    out = iterate(society, environment, pop, seeds=seeds, iteration=iteration, channels=channels,
                  replicate_offset=replicate, record=True)
    tup = lambda a: tuple(int(v) for v in a)  # noqa: E731
    return IterationTrace(
        iteration=iteration,
        e_society=tup(out.es[0]),
        e_environment=tup(out.ee[0]),
        society_states=[tup(xs)] + [tup(s[0]) for s, _ in out.trace_s],
        environment_states=[tup(xe)] + [tup(s[0]) for s, _ in out.trace_e],
        society_messages=[tup(m[0]) for _, m in out.trace_s],
        environment_messages=[tup(m[0]) for _, m in out.trace_e],
    )


# --------------------------------------------------------------------------
# joint distributions over (X^S_0, X^E_tau)
# --------------------------------------------------------------------------


def flatten_states(states: np.ndarray, cards: Sequence[int]) -> np.ndarray:
    """Mixed-radix symbol per row; component 0 is least significant."""
    clipped = np.minimum(states, np.asarray(cards, dtype=np.int64) - 1)
    return _mixed_radix([clipped[:, i] for i in range(clipped.shape[1])], cards, clipped.shape[0])


def check_flattening(society: AgentSpec, environment: AgentSpec, limit: int) -> None:
    size = society.joint_size() * environment.joint_size()
    if size > limit:
        raise EnumerationLimitError(
            f"joint state space |X^S| x |X^E| = {size} exceeds the flattening limit {limit}"
        )


def outcome_joint(outcome: IterationOutcome, society: AgentSpec, environment: AgentSpec) -> dict[tuple[int, int], float]:
    """Weighted joint over (flattened starting society state, flattened ending environment state)."""
    s = flatten_states(outcome.xs0, society.cardinalities)
    e = flatten_states(outcome.xe, environment.cardinalities)
    joint: dict[tuple[int, int], float] = {}
    pairs = np.stack([s, e], axis=1)
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    w = np.bincount(inv.reshape(-1), weights=outcome.weights, minlength=len(uniq))
    for (a, b), p in zip(uniq, w):
        joint[(int(a), int(b))] = float(p)
    return joint


@dataclass
class IterationContext:
    """Everything needed to replay one iteration.

    ``boundary`` is a distribution over boundary states, ``[(xs, xe, p), ...]``;
    use :func:`point_boundary` for a single fixed state.
    """

    society: AgentSpec
    environment: AgentSpec
    boundary: Sequence[tuple[Sequence[int], Sequence[int], float]]
    seeds: SeedPlan = field(default_factory=lambda: SeedPlan(0))
    iteration: int = 0
    channels: tuple[ObservationChannel, ObservationChannel] | None = None
    limit: int = DEFAULT_ENUMERATION_LIMIT


def point_boundary(xs: Sequence[int], xe: Sequence[int]) -> list[tuple[tuple[int, ...], tuple[int, ...], float]]:
    return [(tuple(xs), tuple(xe), 1.0)]


def ensemble_rollout(context: IterationContext, R: int) -> dict[tuple[int, int], int]:
    """``R`` sampled replays of one iteration; returns joint counts over
    (flattened ``X^S_0``, flattened ``X^E_tau``)."""
    if R < 1:
        raise ValueError("R must be >= 1")
    check_flattening(context.society, context.environment, context.limit)
    pop = distribution_population(context.boundary, exact=False, R=R, seeds=context.seeds)
    out = iterate(context.society, context.environment, pop, seeds=context.seeds,
                  iteration=context.iteration, channels=context.channels)
    s = flatten_states(out.xs0, context.society.cardinalities)
    e = flatten_states(out.xe, context.environment.cardinalities)
    uniq, counts = np.unique(np.stack([s, e], axis=1), axis=0, return_counts=True)
    return {(int(a), int(b)): int(c) for (a, b), c in zip(uniq, counts)}


def exact_joint(context: IterationContext) -> dict[tuple[int, int], float]:
    """Exact enumeration counterpart of :func:`ensemble_rollout`."""
    check_flattening(context.society, context.environment, context.limit)
    pop = distribution_population(context.boundary, exact=True)
    out = iterate(context.society, context.environment, pop, iteration=context.iteration,
                  channels=context.channels, limit=context.limit)
    return outcome_joint(out, context.society, context.environment)
