"""Domain types and single-machine semantics.

A machine holds an integer state in ``[0, cardinality)``, reads a frozen
external input vector ``e`` (one symbol per machine of the *other* agent)
plus one message per parent in the message graph, and emits a new state and
a single broadcast message.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

GENERIC = "generic"
LEDGER = "ledger"
STORE = "store"
ROLES = (GENERIC, LEDGER, STORE)

# ledger opcodes
NOOP, WRITE, READ = 0, 1, 2
FILL_SYMBOL = 0

# exhaustive checks above this many domain points are refused
DOMAIN_LIMIT = 1 << 22

Key = tuple[int, tuple[int, ...], tuple[int, ...]]


class ContractViolation(ValueError):
    """An operation was called outside its declared domain."""


# --------------------------------------------------------------------------
# update rules
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TableRule:
    """Explicit map ``(x, e[ext_indices], inbox) -> (x', m)``.

    Only the external-input components listed in ``ext_indices`` are part of
    the key; the rest of ``e`` is ignored.
    """

    table: Mapping[Key, tuple[int, int]]
    ext_indices: tuple[int, ...] = ()

    @classmethod
    def from_function(
        cls,
        fn: Callable[[int, tuple[int, ...], tuple[int, ...]], tuple[int, int]],
        cardinality: int,
        msg_cardinality: int,
        n_parents: int,
        ext_cards: Sequence[int] = (),
        ext_indices: Sequence[int] = (),
    ) -> "TableRule":
        ext_indices = tuple(ext_indices)
        table = {}
        for key in iter_domain(cardinality, [ext_cards[i] for i in ext_indices], msg_cardinality, n_parents):
            x_next, m = fn(*key)
            table[key] = (int(x_next), int(m))
        return cls(table, ext_indices)

    def lookup(self, x: int, e: Sequence[int], inbox: Sequence[int]) -> tuple[int, int]:
        key = (int(x), tuple(int(e[i]) for i in self.ext_indices), tuple(int(v) for v in inbox))
        try:
            return self.table[key]
        except KeyError:
            raise ContractViolation(f"no table row for {key}") from None


@dataclass(frozen=True)
class RingCoeffs:
    """Coefficients of ``a*x + b.e + c.inbox + d`` taken modulo some cardinality."""

    a: int = 0
    b: tuple[int, ...] = ()
    c: tuple[int, ...] = ()
    d: int = 0

    def evaluate(self, x, e, inbox, modulus: int):
        """Scalar or batched evaluation; batched ``e``/``inbox`` are ``(R, k)`` arrays."""
        total = self.a * x + self.d
        for i, coef in enumerate(self.b):
            if coef:
                total = total + coef * _component(e, i)
        for j, coef in enumerate(self.c):
            if coef:
                total = total + coef * _component(inbox, j)
        return total % modulus


def _component(vec, i):
    if isinstance(vec, np.ndarray) and vec.ndim == 2:
        return vec[:, i]
    return vec[i]


@dataclass(frozen=True)
class LinearRingRule:
    """``x' = state(x, e, in) mod |X_v|`` and ``m = message(x, e, in) mod |M|``."""

    state: RingCoeffs
    message: RingCoeffs

    @property
    def n_parents(self) -> int:
        return len(self.state.c)


@dataclass(frozen=True)
class KernelRule:
    """Stochastic update: each key maps to a distribution over ``(x', m)`` pairs."""

    rows: Mapping[Key, tuple[tuple[tuple[int, int], float], ...]]
    ext_indices: tuple[int, ...] = ()

    def row(self, x: int, e: Sequence[int], inbox: Sequence[int]):
        key = (int(x), tuple(int(e[i]) for i in self.ext_indices), tuple(int(v) for v in inbox))
        try:
            return self.rows[key]
        except KeyError:
            raise ContractViolation(f"no kernel row for {key}") from None


@dataclass(frozen=True)
class FunctionRule:
    """Deterministic rule given as a vectorised callable.

    ``fn(x, e, inbox)`` receives ``x`` of shape ``(R,)``, ``e`` of shape
    ``(R, len(e))`` and ``inbox`` of shape ``(R, |pa(v)|)`` and returns
    ``(x', m)`` arrays. Used where an explicit table would be astronomically
    large (e.g. a Mealy machine indexing into a long bit stream).
    """

    fn: Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
    n_parents: int = 0
    label: str = ""


UpdateRule = TableRule | LinearRingRule | KernelRule | FunctionRule


# --------------------------------------------------------------------------
# machines, graphs, agents
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MachineSpec:
    cardinality: int
    rule: UpdateRule | None = None
    role: str = GENERIC
    name: str = ""


@dataclass(frozen=True)
class MessageGraph:
    n: int
    edges: tuple[tuple[int, int], ...] = ()
    max_fanout: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(u), int(v)) for u, v in self.edges))

    @cached_property
    def _parents(self) -> tuple[tuple[int, ...], ...]:
        pa: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            if 0 <= v < self.n:
                pa[v].append(u)
        return tuple(tuple(sorted(p)) for p in pa)

    @cached_property
    def _children(self) -> tuple[tuple[int, ...], ...]:
        ch: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            if 0 <= u < self.n:
                ch[u].append(v)
        return tuple(tuple(sorted(c)) for c in ch)

    def parents(self, v: int) -> tuple[int, ...]:
        return self._parents[v]

    def children(self, v: int) -> tuple[int, ...]:
        return self._children[v]

    def out_degree(self, v: int) -> int:
        return len(self._children[v])

    def fanout(self) -> int:
        """Maximal out-degree over all nodes (0 for an empty graph)."""
        return max((len(c) for c in self._children), default=0)


@dataclass(frozen=True)
class AgentSpec:
    """A full machine network plus the parameters that frame its computation.

    ``sigma`` is the noise level of the channel through which this agent
    observes the other one, and ``ext_cards`` is the alphabet of that
    observation: the other agent's machine cardinalities.
    """

    machines: tuple[MachineSpec, ...]
    graph: MessageGraph
    tau: int = 1
    msg_cardinality: int = 2
    sigma: float = 0.0
    ext_cards: tuple[int, ...] = ()
    ledger_addresses: int = 1

    def __post_init__(self):
        object.__setattr__(self, "machines", tuple(self.machines))
        object.__setattr__(self, "ext_cards", tuple(int(k) for k in self.ext_cards))

    @property
    def n(self) -> int:
        return len(self.machines)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(m.cardinality for m in self.machines)

    def parents(self, v: int) -> tuple[int, ...]:
        return self.graph.parents(v)

    def joint_size(self) -> int:
        return math.prod(self.cardinalities)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(f"- {v}" for v in self.violations)


def iter_domain(cardinality: int, ext_cards: Sequence[int], msg_cardinality: int, n_parents: int) -> Iterator[Key]:
    ext_space = list(itertools.product(*(range(k) for k in ext_cards)))
    in_space = list(itertools.product(range(msg_cardinality), repeat=n_parents))
    for x in range(cardinality):
        for e in ext_space:
            for inbox in in_space:
                yield (x, e, inbox)


def domain_size(cardinality: int, ext_cards: Sequence[int], msg_cardinality: int, n_parents: int) -> int:
    return cardinality * math.prod(ext_cards) * msg_cardinality**n_parents


def rule_arity(rule: UpdateRule) -> int | None:
    """Number of parent messages a rule expects, or None if it cannot tell."""
    if isinstance(rule, LinearRingRule):
        return len(rule.state.c)
    if isinstance(rule, FunctionRule):
        return rule.n_parents
    mapping = rule.table if isinstance(rule, TableRule) else rule.rows
    for key in mapping:
        return len(key[2])
    return None


def _check_keys(mapping, v, card, ext_cards, ext_indices, msg_card, n_pa, out: list[str]) -> int:
    valid = 0
    for x, e, inbox in mapping:
        if not (0 <= x < card):
            out.append(f"machine {v}: table key state {x} out of range")
            continue
        if len(e) != len(ext_indices) or any(not (0 <= s < ext_cards[i]) for s, i in zip(e, ext_indices)):
            out.append(f"machine {v}: table key external input {e} out of range")
            continue
        if len(inbox) != n_pa or any(not (0 <= s < msg_card) for s in inbox):
            out.append(f"machine {v}: table key inbox {inbox} does not match parent arity {n_pa}")
            continue
        valid += 1
    return valid


def _validate_rule(agent: AgentSpec, v: int, out: list[str]) -> None:
    machine = agent.machines[v]
    rule = machine.rule
    n_pa = len(agent.parents(v)) if v < agent.graph.n else 0
    card, msg_card = machine.cardinality, agent.msg_cardinality
    if rule is None:
        if machine.role != LEDGER:
            out.append(f"machine {v}: missing update rule")
        return
    if isinstance(rule, LinearRingRule):
        for label, coeffs in (("state", rule.state), ("message", rule.message)):
            if len(coeffs.b) != len(agent.ext_cards):
                out.append(
                    f"machine {v}: {label} coefficients over external input have length {len(coeffs.b)}, "
                    f"expected {len(agent.ext_cards)}"
                )
            if len(coeffs.c) != n_pa:
                out.append(f"machine {v}: parent arity {len(coeffs.c)} != |pa(v)| = {n_pa}")
        return
    if isinstance(rule, FunctionRule):
        if rule.n_parents != n_pa:
            out.append(f"machine {v}: parent arity {rule.n_parents} != |pa(v)| = {n_pa}")
        return
    ext_indices = rule.ext_indices
    if any(not (0 <= i < len(agent.ext_cards)) for i in ext_indices):
        out.append(f"machine {v}: external input index out of range {ext_indices}")
        return
    proj = [agent.ext_cards[i] for i in ext_indices]
    size = domain_size(card, proj, msg_card, n_pa)
    if size > DOMAIN_LIMIT:
        out.append(f"machine {v}: rule domain of {size} rows exceeds limit {DOMAIN_LIMIT}")
        return
    mapping = rule.table if isinstance(rule, TableRule) else rule.rows
    valid = _check_keys(mapping, v, card, agent.ext_cards, ext_indices, msg_card, n_pa, out)
    if valid < size:
        out.append(f"machine {v}: update rule not total ({size - valid} of {size} rows missing)")
    if isinstance(rule, TableRule):
        for key, (x_next, m) in rule.table.items():
            if not (0 <= x_next < card) or not (0 <= m < msg_card):
                out.append(f"machine {v}: table output {(x_next, m)} out of range at {key}")
                break
    else:
        for key, outcomes in rule.rows.items():
            total = sum(p for _, p in outcomes)
            if abs(total - 1.0) > 1e-12:
                out.append(f"machine {v}: kernel row {key} sums to {total!r}")
                break
            if any(p < 0 for _, p in outcomes):
                out.append(f"machine {v}: kernel row {key} has a negative probability")
                break
            if any(not (0 <= x_next < card) or not (0 <= m < msg_card) for (x_next, m), _ in outcomes):
                out.append(f"machine {v}: kernel outcome out of range at {key}")
                break


def validate_agent(agent: AgentSpec) -> ValidationReport:
    """Collect every invariant violation; never raises."""
    out: list[str] = []
    g = agent.graph
    if g.n != agent.n:
        out.append(f"graph has {g.n} nodes but agent has {agent.n} machines")
    seen = set()
    for u, v in g.edges:
        if not (0 <= u < g.n and 0 <= v < g.n):
            out.append(f"edge endpoint out of range: {(u, v)} with N={g.n}")
            continue
        if u == v:
            out.append(f"self-loop at node {u}")
        if (u, v) in seen:
            out.append(f"duplicate edge {(u, v)}")
        seen.add((u, v))
    if g.max_fanout is not None:
        if g.max_fanout < 0:
            out.append(f"negative fan-out cap {g.max_fanout}")
        for u in range(g.n):
            if g.out_degree(u) > g.max_fanout:
                out.append(f"node {u} out-degree {g.out_degree(u)} exceeds fan-out cap {g.max_fanout}")
    if agent.tau < 1:
        out.append(f"tau must be >= 1, got {agent.tau}")
    if agent.msg_cardinality < 1:
        out.append(f"message cardinality must be >= 1, got {agent.msg_cardinality}")
    if not (0.0 <= agent.sigma <= 1.0):
        out.append(f"sigma must lie in [0, 1], got {agent.sigma}")
    if any(k < 1 for k in agent.ext_cards):
        out.append(f"external input alphabet sizes must be >= 1: {agent.ext_cards}")
    for v, machine in enumerate(agent.machines):
        if machine.cardinality < 1:
            out.append(f"machine {v}: cardinality must be >= 1")
            continue
        if machine.role not in ROLES:
            out.append(f"machine {v}: unknown role {machine.role!r}")
            continue
        if machine.role == LEDGER:
            if agent.ledger_addresses < 1:
                out.append("ledger address range must be >= 1")
            elif agent.msg_cardinality < 4 * agent.ledger_addresses:
                out.append(
                    f"machine {v}: ledger traffic needs |M| >= {4 * agent.ledger_addresses}, "
                    f"got {agent.msg_cardinality}"
                )
        if g.n == agent.n:
            _validate_rule(agent, v, out)
    return ValidationReport(out)


# --------------------------------------------------------------------------
# single machine semantics
# --------------------------------------------------------------------------


def sample_outcome(outcomes: Sequence[tuple[tuple[int, int], float]], u: float) -> tuple[int, int]:
    """Inverse-CDF pick with a uniform ``u`` in [0, 1)."""
    acc = 0.0
    for pair, p in outcomes:
        acc += p
        if u < acc:
            return pair
    # round-off in the last cumulative sum
    for pair, p in reversed(outcomes):
        if p > 0:
            return pair
    raise ContractViolation("empty kernel row")


def step_machine(
    machine: MachineSpec,
    x: int,
    e: Sequence[int],
    inbox: Sequence[int],
    rng: np.random.Generator | None = None,
    *,
    msg_cardinality: int = 2,
    n_parents: int | None = None,
) -> tuple[int, int]:
    """One machine's update for one timestep.

    Resource-store machines return their unchanged state together with the
    requested transfer amount; the engine settles the transfer.
    """
    rule = machine.rule
    if machine.role == LEDGER:
        raise ContractViolation("ledger machines are driven by apply_ledger_message")
    if rule is None:
        raise ContractViolation("machine has no update rule")
    arity = rule_arity(rule)
    if n_parents is not None and len(inbox) != n_parents:
        raise ContractViolation(f"inbox has {len(inbox)} messages, machine has {n_parents} parents")
    if arity is not None and len(inbox) != arity:
        raise ContractViolation(f"inbox has {len(inbox)} messages, rule expects {arity}")
    if isinstance(rule, TableRule):
        x_next, m = rule.lookup(x, e, inbox)
    elif isinstance(rule, LinearRingRule):
        if len(rule.state.b) > len(e):
            raise ContractViolation("external input shorter than the rule's coefficient vector")
        x_next = int(rule.state.evaluate(int(x), e, inbox, machine.cardinality))
        m = int(rule.message.evaluate(int(x), e, inbox, msg_cardinality))
    elif isinstance(rule, KernelRule):
        if rng is None:
            raise ContractViolation("stochastic kernel needs an rng")
        x_next, m = sample_outcome(rule.row(x, e, inbox), float(rng.random()))
    elif isinstance(rule, FunctionRule):
        xs, ms = rule.fn(
            np.array([x], dtype=np.int64),
            np.array([list(e)], dtype=np.int64).reshape(1, len(e)),
            np.array([list(inbox)], dtype=np.int64).reshape(1, len(inbox)),
        )
        x_next, m = int(np.asarray(xs)[0]), int(np.asarray(ms)[0])
    else:  # pragma: no cover
        raise ContractViolation(f"unknown rule type {type(rule).__name__}")
    if machine.role == STORE:
        return int(x), int(m)
    return int(x_next), int(m)


def apply_resource_transfer(sender: int, receiver: int, amount: int) -> tuple[int, int]:
    """Move ``amount`` units; an overdraw is rejected and leaves both unchanged."""
    if amount < 0:
        raise ValueError(f"transfer amount must be nonnegative, got {amount}")
    if amount > sender:
        return sender, receiver
    return sender - amount, receiver + amount


# --------------------------------------------------------------------------
# ledger
# --------------------------------------------------------------------------


def decode_ledger_message(m: int, addresses: int) -> tuple[int, int, int]:
    """``m -> (opcode, addr, symbol)``; opcode 3 is not a valid operation and decodes as noop."""
    op = m % 4
    addr = (m // 4) % addresses
    symbol = m // (4 * addresses)
    if op not in (NOOP, WRITE, READ):
        op = NOOP
    return op, addr, symbol


def encode_ledger_message(op: int, addr: int, symbol: int, addresses: int) -> int:
    if op not in (NOOP, WRITE, READ):
        raise ValueError(f"bad opcode {op}")
    if not (0 <= addr < addresses):
        raise ValueError(f"address {addr} outside [0, {addresses})")
    return op + 4 * addr + 4 * addresses * symbol


def apply_ledger_message(tape: Sequence[int], message: int, addresses: int) -> tuple[tuple[int, ...], int]:
    """Apply one request to a growable tape and return ``(tape', reply)``."""
    op, addr, symbol = decode_ledger_message(int(message), addresses)
    tape = tuple(tape)
    if op == WRITE:
        if addr >= len(tape):
            tape = tape + (FILL_SYMBOL,) * (addr + 1 - len(tape))
        tape = tape[:addr] + (symbol,) + tape[addr + 1 :]
        return tape, FILL_SYMBOL
    if op == READ:
        return tape, tape[addr] if addr < len(tape) else FILL_SYMBOL
    return tape, FILL_SYMBOL


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------


def ring_rule(
    n_ext: int,
    n_parents: int,
    *,
    state: tuple[int, Sequence[int], Sequence[int], int] | None = None,
    message: tuple[int, Sequence[int], Sequence[int], int] | None = None,
) -> LinearRingRule:
    """Convenience constructor; omitted coefficient sets default to zeros."""

    def coeffs(vals):
        if vals is None:
            return RingCoeffs(0, (0,) * n_ext, (0,) * n_parents, 0)
        a, b, c, d = vals
        return RingCoeffs(int(a), tuple(int(v) for v in b), tuple(int(v) for v in c), int(d))

    return LinearRingRule(coeffs(state), coeffs(message))


def identity_rule(n_ext: int, n_parents: int) -> LinearRingRule:
    """``x' = x``, ``m = 0``."""
    return ring_rule(n_ext, n_parents, state=(1, [0] * n_ext, [0] * n_parents, 0))

