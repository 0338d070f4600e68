"""Independent brute-force references.

Nothing here imports the engine: iterations are replayed with plain Python
loops over dicts, one machine at a time, so agreement with the vectorised
code is evidence rather than tautology.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict

from coevo.core import KernelRule, LinearRingRule, TableRule

# values computed by hand and frozen
BINARY_COPY_MI = 1.0
# 1 - H2(0.75): binary copy through a channel that replaces w.p. 1/2
COPY_SIGMA_HALF_MI = 1.0 - (-(0.75 * math.log2(0.75) + 0.25 * math.log2(0.25)))
KELLY_07_03_EVEN = 0.7 * math.log2(1.4) + 0.3 * math.log2(0.6)


def entropy(dist) -> float:
    return -sum(p * math.log2(p) for p in dist.values() if p > 0)


def mi(joint: dict) -> float:
    a, b = defaultdict(float), defaultdict(float)
    for (x, y), p in joint.items():
        a[x] += p
        b[y] += p
    return entropy(a) + entropy(b) - entropy(joint)


def channel_outcomes(symbols, sigma, alphabet):
    """All noisy observations of ``symbols`` with their probabilities."""
    per = []
    for s, k in zip(symbols, alphabet):
        opts = {}
        for j in range(k):
            opts[j] = sigma / k + (1 - sigma if j == s else 0.0)
        per.append([(j, p) for j, p in opts.items() if p > 0])
    for combo in itertools.product(*per):
        p = 1.0
        for _, q in combo:
            p *= q
        yield tuple(j for j, _ in combo), p


def project(states, ext_cards):
    out = []
    for i, k in enumerate(ext_cards):
        out.append((states[i] if i < len(states) else 0) % k)
    return tuple(out)


def machine_outcomes(agent, v, x, e, inbox):
    """Distribution over ``(x', m)`` for generic machine ``v``."""
    rule = agent.machines[v].rule
    card, msg = agent.machines[v].cardinality, agent.msg_cardinality
    if isinstance(rule, LinearRingRule):
        def lin(c, mod):
            tot = c.a * x + c.d + sum(b * s for b, s in zip(c.b, e)) + sum(w * s for w, s in zip(c.c, inbox))
            return tot % mod
        return [((lin(rule.state, card), lin(rule.message, msg)), 1.0)]
    key = (x, tuple(e[i] for i in rule.ext_indices), tuple(inbox))
    if isinstance(rule, TableRule):
        return [(rule.table[key], 1.0)]
    if isinstance(rule, KernelRule):
        return [(pair, p) for pair, p in rule.rows[key] if p > 0]
    raise TypeError(type(rule))


def agent_run_distribution(agent, x0, e):
    """Distribution of the end state after ``tau`` synchronous steps from a zero inbox."""
    n = agent.n
    parents = [sorted(u for u, w in agent.graph.edges if w == v) for v in range(n)]
    frontier = {(tuple(x0), (0,) * n): 1.0}  # (states, last messages) -> prob
    for _ in range(agent.tau):
        nxt = defaultdict(float)
        for (xs, msgs), p in frontier.items():
            choices = []
            for v in range(n):
                inbox = tuple(msgs[u] for u in parents[v])
                choices.append(machine_outcomes(agent, v, xs[v], e, inbox))
            for combo in itertools.product(*choices):
                q = p
                for _, pr in combo:
                    q *= pr
                nxt[(tuple(c[0][0] for c in combo), tuple(c[0][1] for c in combo))] += q
        frontier = nxt
    out = defaultdict(float)
    for (xs, _), p in frontier.items():
        out[xs] += p
    return out


def mi_oracle(society, environment, boundary) -> float:
    """``I(X^E_tau; X^S_0)`` by explicit enumeration."""
    joint = defaultdict(float)
    for xs, xe, p in boundary:
        obs = project(xs, environment.ext_cards)
        for ee, pe in channel_outcomes(obs, environment.sigma, environment.ext_cards):
            for end, pk in agent_run_distribution(environment, xe, ee).items():
                joint[(tuple(xs), end)] += p * pe * pk
    return mi(joint)


def capacity_bruteforce(sigma: float, k: int) -> float:
    joint = {}
    for i in range(k):
        for j in range(k):
            joint[(i, j)] = (1.0 / k) * (sigma / k + (1 - sigma if i == j else 0.0))
    return mi(joint)


def ca_reference(rule: int, init, steps: int):
    width = len(init)
    rows = [list(init)]
    for _ in range(steps):
        r = rows[-1]
        rows.append([(rule >> (4 * r[(i - 1) % width] + 2 * r[i] + r[(i + 1) % width])) & 1 for i in range(width)])
    return rows


def cmi_bruteforce(step_dist, states, inputs) -> float:
    """``I(X'; E | X)`` with uniform ``X`` and ``E``; ``step_dist(x, e)`` -> {x': p}."""
    total = 0.0
    px = 1.0 / len(states)
    for x in states:
        joint = defaultdict(float)
        for e in inputs:
            for y, p in step_dist(x, e).items():
                joint[(e, y)] += p / len(inputs)
        total += px * mi(joint)
    return total
