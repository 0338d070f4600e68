from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from coevo.core import AgentSpec, KernelRule, MachineSpec, MessageGraph, TableRule, iter_domain, ring_rule  # noqa: E402


def binary_agent(rule, ext_cards=(2,), sigma=0.0, tau=1):
    return AgentSpec((MachineSpec(2, rule),), MessageGraph(1), tau=tau, sigma=sigma, ext_cards=ext_cards)


@pytest.fixture
def copy_env():
    return binary_agent(ring_rule(1, 0, state=(0, [1], [], 0)))


@pytest.fixture
def identity_env():
    return binary_agent(ring_rule(1, 0, state=(1, [0], [], 0)))


def random_agent(rng: np.random.Generator, n: int, cards, ext_cards, *, msg=2, tau=1, sigma=0.0, kinds=("ring", "table", "kernel")):
    """Random generic agent with a random message graph."""
    edges = tuple((u, v) for u in range(n) for v in range(n) if u != v and rng.random() < 0.4)
    graph = MessageGraph(n, edges)
    machines = []
    for v in range(n):
        k = len(graph.parents(v))
        kind = kinds[int(rng.integers(len(kinds)))]
        card = cards[v]
        if kind == "ring":
            rule = ring_rule(
                len(ext_cards), k,
                state=(rng.integers(card), rng.integers(card, size=len(ext_cards)), rng.integers(card, size=k), rng.integers(card)),
                message=(rng.integers(msg), rng.integers(msg, size=len(ext_cards)), rng.integers(msg, size=k), rng.integers(msg)),
            )
        else:
            ext_idx = tuple(i for i in range(len(ext_cards)) if rng.random() < 0.7)
            proj = [ext_cards[i] for i in ext_idx]
            if kind == "table":
                rule = TableRule(
                    {key: (int(rng.integers(card)), int(rng.integers(msg))) for key in iter_domain(card, proj, msg, k)},
                    ext_idx,
                )
            else:
                rows = {}
                for key in iter_domain(card, proj, msg, k):
                    outs = [(int(rng.integers(card)), int(rng.integers(msg))) for _ in range(2)]
                    p = float(rng.random())
                    rows[key] = ((outs[0], p), (outs[1], 1.0 - p))
                rule = KernelRule(rows, ext_idx)
        machines.append(MachineSpec(card, rule))
    return AgentSpec(tuple(machines), graph, tau=tau, msg_cardinality=msg, sigma=sigma, ext_cards=tuple(ext_cards))
