"""Known computational models written as MCM agents, with direct references.

* elementary cellular automata on a ring (:func:`ca_to_mcm`, :func:`ca_reference`);
* communicating Mealy machines that scan an external bit stream with a
  per-machine counter (:func:`mealy_mcm`, :func:`mealy_reference`);
* synchronous Glauber dynamics of an Ising spin system (:func:`glauber_mcm`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from coevo.core import (
    AgentSpec,
    ContractViolation,
    FunctionRule,
    KernelRule,
    MachineSpec,
    MessageGraph,
    TableRule,
    iter_domain,
)
from coevo.engine import primed_inbox, run_timesteps

# --------------------------------------------------------------------------
# cellular automata
# --------------------------------------------------------------------------


def ca_to_mcm(rule: int, width: int, *, tau: int = 1, ext_cards: Sequence[int] = ()) -> AgentSpec:
    """Elementary CA ``rule`` on a periodic ring of ``width`` binary cells.

    Cell ``i`` has parents ``i-1`` and ``i+1``; its message is its new state,
    so a primed inbox (see :func:`ca_trace`) reproduces the CA exactly.
    """
    if not (0 <= rule <= 255):
        raise ValueError("elementary CA rules are numbered 0..255")
    if width < 3:
        raise ValueError("width must be >= 3")
    bits = [(rule >> k) & 1 for k in range(8)]
    edges = []
    machines = []
    for i in range(width):
        left, right = (i - 1) % width, (i + 1) % width
        edges += [(left, i), (right, i)]
        parents = sorted((left, right))
        left_slot = parents.index(left)

        def fn(x, e, inbox, left_slot=left_slot):
            l, r = inbox[left_slot], inbox[1 - left_slot]
            new = bits[4 * l + 2 * x + r]
            return new, new

        machines.append(MachineSpec(2, TableRule.from_function(fn, 2, 2, 2), name=f"cell{i}"))
    return AgentSpec(tuple(machines), MessageGraph(width, tuple(edges)), tau=tau, msg_cardinality=2,
                     ext_cards=tuple(ext_cards))


def ca_reference(rule: int, init: Sequence[int], steps: int) -> np.ndarray:
    """Direct array CA with periodic boundary; returns ``(steps + 1, width)``."""
    bits = np.array([(rule >> k) & 1 for k in range(8)], dtype=np.int64)
    row = np.asarray(init, dtype=np.int64)
    out = [row]
    for _ in range(steps):
        row = bits[4 * np.roll(row, 1) + 2 * row + np.roll(row, -1)]
        out.append(row)
    return np.stack(out)


def ca_trace(agent: AgentSpec, init: Sequence[int], steps: int) -> np.ndarray:
    """Run a CA agent from ``init`` with neighbours' states primed into the inbox."""
    e = (0,) * len(agent.ext_cards)
    return run_timesteps(agent, init, steps, e=e, inbox=primed_inbox(agent, init))[:, 0, :]


# --------------------------------------------------------------------------
# Mealy machines
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MealySpec:
    """Finite transducer reading one stream bit and its parents' messages per step.

    ``delta(q, bit, inbox) -> (q', out)`` works elementwise on numpy arrays;
    ``inbox`` has shape ``(R, n_parents)``.
    """

    n_states: int
    delta: Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
    initial: int = 0
    label: str = ""


def mealy_mcm(
    specs: Sequence[MealySpec],
    stream: Sequence[int],
    *,
    edges: Sequence[tuple[int, int]] = (),
    tau: int | None = None,
    msg_cardinality: int = 2,
) -> tuple[AgentSpec, tuple[int, ...]]:
    """Communicating Mealy machines over a bit stream.

    Machine ``v`` has state ``counter * |Q_v| + q`` where the counter starts
    at 0 and grows by one per timestep; at counter value ``c`` the machine
    reads stream bit ``c``.  Returns the agent and the external input vector
    (the stream itself) to run it with.
    """
    stream = tuple(int(b) for b in stream)
    if any(b not in (0, 1) for b in stream):
        raise ValueError("stream must be binary")
    tau = len(stream) if tau is None else tau
    if tau > len(stream):
        raise ContractViolation(
            f"tau={tau} exceeds the counter range: the stream has only {len(stream)} bits"
        )
    graph = MessageGraph(len(specs), tuple(edges))
    machines = []
    for v, mealy in enumerate(specs):
        Q = mealy.n_states
        n_pa = len(graph.parents(v))

        def fn(x, e, inbox, Q=Q, delta=mealy.delta):
            counter, q = x // Q, x % Q
            idx = np.minimum(counter, e.shape[1] - 1)
            bit = e[np.arange(len(x)), idx]
            q_next, out = delta(q, bit, inbox)
            return (counter + 1) * Q + np.asarray(q_next), np.asarray(out) % msg_cardinality

        card = Q * (tau + 1)
        machines.append(MachineSpec(card, FunctionRule(fn, n_pa, mealy.label or f"mealy{v}"), name=mealy.label))
    agent = AgentSpec(tuple(machines), graph, tau=tau, msg_cardinality=msg_cardinality,
                      ext_cards=(2,) * len(stream))
    return agent, stream


def mealy_initial(specs: Sequence[MealySpec]) -> tuple[int, ...]:
    return tuple(s.initial for s in specs)


def mealy_run(agent: AgentSpec, specs: Sequence[MealySpec], stream: Sequence[int], steps: int | None = None):
    """States (without counters) and messages of a Mealy agent; ``(steps, n)`` each."""
    from coevo.engine import compile_agent

    steps = agent.tau if steps is None else steps
    ca = compile_agent(agent)
    st = np.asarray([mealy_initial(specs)], dtype=np.int64)
    ib = ca.empty_inbox(1)
    e = np.asarray([stream], dtype=np.int64)
    tp = ca.empty_tapes(1)
    qs, ms = [], []
    Q = np.array([s.n_states for s in specs])
    for _ in range(steps):
        st, ib, tp, out = ca.step(st, ib, e, tp, {})
        qs.append(st[0] % Q)
        ms.append(out[0])
    return np.array(qs), np.array(ms)


def mealy_reference(
    specs: Sequence[MealySpec], stream: Sequence[int], edges: Sequence[tuple[int, int]], steps: int,
    msg_cardinality: int = 2,
):
    """Product-automaton reference: one global state ``(q_1..q_n, last messages)`` per step."""
    n = len(specs)
    parents = [sorted(u for u, w in edges if w == v) for v in range(n)]
    q = [s.initial for s in specs]
    last = [0] * n
    qs, ms = [], []
    for t in range(steps):
        new_q, new_m = [], []
        for v, mealy in enumerate(specs):
            box = np.array([[last[u] for u in parents[v]]], dtype=np.int64).reshape(1, len(parents[v]))
            qn, out = mealy.delta(np.array([q[v]]), np.array([stream[t]]), box)
            new_q.append(int(np.asarray(qn).reshape(-1)[0]))
            new_m.append(int(np.asarray(out).reshape(-1)[0]) % msg_cardinality)
        q, last = new_q, new_m
        qs.append(q)
        ms.append(last)
    return np.array(qs), np.array(ms)


# --------------------------------------------------------------------------
# Glauber dynamics
# --------------------------------------------------------------------------


def spin(x):
    """State 0/1 to spin -1/+1."""
    return 2 * np.asarray(x) - 1


def glauber_flip_probability(beta: float, s: int, local_field: float) -> float:
    """``1 / (1 + exp(2 beta s h_loc))`` with ``h_loc = sum_j J_ij s_j + h_i``."""
    z = 2.0 * beta * s * local_field
    if z > 700:
        return 0.0
    return 1.0 / (1.0 + math.exp(z))


def glauber_mcm(
    J: np.ndarray | Sequence[Sequence[float]],
    beta: float,
    h: Sequence[float] | float = 0.0,
    *,
    tau: int = 1,
    ext_cards: Sequence[int] = (),
) -> AgentSpec:
    """Ising spins under synchronous heat-bath (Glauber) updates.

    The message graph has an edge ``j -> i`` for every nonzero coupling; each
    spin broadcasts its new value.  Prime the inbox with the current spins
    before the first step.
    """
    J = np.asarray(J, dtype=float)
    n = J.shape[0]
    if J.shape != (n, n):
        raise ContractViolation("coupling matrix must be square")
    if not np.allclose(J, J.T, atol=0, rtol=0):
        raise ContractViolation("coupling matrix must be symmetric")
    if np.any(np.diag(J) != 0):
        raise ContractViolation("coupling matrix must have a zero diagonal")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    hv = np.broadcast_to(np.asarray(h, dtype=float), (n,))
    edges = tuple((j, i) for i in range(n) for j in range(n) if J[i, j] != 0)
    graph = MessageGraph(n, edges)
    machines = []
    for i in range(n):
        parents = graph.parents(i)
        rows = {}
        for x, e, inbox in iter_domain(2, (), 2, len(parents)):
            s = 2 * x - 1
            local = hv[i] + sum(J[i, j] * (2 * m - 1) for j, m in zip(parents, inbox))
            p = glauber_flip_probability(beta, s, local)
            rows[(x, e, inbox)] = (((1 - x, 1 - x), p), ((x, x), 1.0 - p))
        machines.append(MachineSpec(2, KernelRule(rows), name=f"spin{i}"))
    return AgentSpec(tuple(machines), graph, tau=tau, msg_cardinality=2, ext_cards=tuple(ext_cards))


def glauber_trace(agent: AgentSpec, init: Sequence[int], steps: int, rng: np.random.Generator) -> np.ndarray:
    e = (0,) * len(agent.ext_cards)
    return run_timesteps(agent, init, steps, e=e, inbox=primed_inbox(agent, init), rng=rng)[:, 0, :]
