"""Post-hoc detectors over simulation logs.

Every function here is a pure function of its inputs, so re-running the
analysis on the same log gives the same report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from coevo.core import MessageGraph


def _series(log: Sequence[Mapping], key: str) -> list[float]:
    return [float(rec[key]) for rec in log]


def detect_escape(gfer: Sequence[float], population: Sequence[float], delta: float = 0.0, k: int = 1) -> list[int]:
    """Steps ``t -> t+1`` (reported as ``t``) that complete a run of ``k``
    consecutive steps where GFER outgrows the population proxy by more than ``1 + delta``.

    Steps with a zero GFER or proxy at either end are undefined; they are
    skipped and break any run in progress.
    """
    if len(gfer) != len(population):
        raise ValueError("gfer and population series differ in length")
    flags, run = [], 0
    for t in range(len(gfer) - 1):
        g0, g1, p0, p1 = gfer[t], gfer[t + 1], population[t], population[t + 1]
        if min(g0, g1, p0, p1) <= 0:
            run = 0
            continue
        if g1 / g0 > (1.0 + delta) * (p1 / p0):
            run += 1
            if run >= k:
                flags.append(t)
        else:
            run = 0
    return flags


def detect_runaway(gfer: Sequence[float], population: Sequence[float], threshold: float = 0.0, k: int = 1) -> list[int]:
    """Iterations ``t`` completing a run of ``k`` consecutive centred second
    differences ``L[t+1] - 2 L[t] + L[t-1]`` above ``threshold``, ``L = log2(GFER / P)``."""
    if len(gfer) != len(population):
        raise ValueError("gfer and population series differ in length")
    logs = [math.log2(g / p) if g > 0 and p > 0 else None for g, p in zip(gfer, population)]
    flags, run = [], 0
    for t in range(1, len(logs) - 1):
        a, b, c = logs[t - 1], logs[t], logs[t + 1]
        if a is None or b is None or c is None:
            run = 0
            continue
        if c - 2 * b + a > threshold:
            run += 1
            if run >= k:
                flags.append(t)
        else:
            run = 0
    return flags


def giant_component_fraction(graph: MessageGraph | tuple[int, Iterable[tuple[int, int]]]) -> float:
    """Largest weakly connected component over ``N``."""
    if isinstance(graph, MessageGraph):
        n, edges = graph.n, graph.edges
    else:
        n, edges = graph
    edges = list(edges)
    if n == 0:
        return 0.0
    if not edges:
        return 1.0 / n
    u = np.array([a for a, _ in edges])
    v = np.array([b for _, b in edges])
    adj = coo_matrix((np.ones(len(u)), (u, v)), shape=(n, n))
    _, labels = connected_components(adj, directed=True, connection="weak")
    return float(np.bincount(labels).max()) / n


def er_edges(n: int, p: float, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Directed Erdos-Renyi graph: each ordered pair ``u != v`` independently with probability ``p``."""
    mask = rng.random((n, n)) < p
    np.fill_diagonal(mask, False)
    return [(int(a), int(b)) for a, b in zip(*np.nonzero(mask))]


def er_point(n: int, mean_degree: float, seeds: int, master: int = 0, index: int = 0) -> dict:
    """Giant-component statistics at one mean degree.

    Mean degree is the mean total (in + out) degree ``2 p (N - 1)``, i.e. the
    degree of the underlying undirected graph that weak connectivity sees.
    Seeds are keyed by ``(index, seed)`` so points can run in any order.
    """
    p = min(1.0, mean_degree / (2.0 * (n - 1)))
    fr = []
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence(master, spawn_key=(index, s)))
        fr.append(giant_component_fraction((n, er_edges(n, p, rng))))
    return {"mean_degree": float(mean_degree), "p": p, "median": float(np.median(fr)), "mean": float(np.mean(fr))}


def er_sweep(n: int, degrees: Sequence[float], seeds: int, master: int = 0) -> list[dict]:
    return [er_point(n, c, seeds, master, i) for i, c in enumerate(degrees)]


def crossing_point(rows: Sequence[Mapping], level: float = 0.5, key: str = "median") -> float | None:
    """Linearly interpolated mean degree where ``key`` first reaches ``level``."""
    for a, b in zip(rows, rows[1:]):
        if a[key] < level <= b[key]:
            w = (level - a[key]) / (b[key] - a[key])
            return a["mean_degree"] + w * (b["mean_degree"] - a["mean_degree"])
    if rows and rows[0][key] >= level:
        return rows[0]["mean_degree"]
    return None


@dataclass
class DetectorReport:
    escape: list[int] = field(default_factory=list)
    runaway: list[int] = field(default_factory=list)
    giant_component: list[float] = field(default_factory=list)
    population: list[float] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "escape": self.escape,
            "runaway": self.runaway,
            "giant_component": self.giant_component,
            "population": self.population,
            "settings": self.settings,
        }


def analyze_log(
    log: Sequence[Mapping],
    *,
    delta: float = 0.05,
    k_escape: int = 3,
    threshold: float = 0.1,
    k_runaway: int = 2,
    proxy: str = "n",
) -> DetectorReport:
    """Run every detector on iteration records (``kind == "iteration"``)."""
    recs = [r for r in log if r.get("kind", "iteration") == "iteration"]
    settings = {"delta": delta, "k_escape": k_escape, "threshold": threshold, "k_runaway": k_runaway, "proxy": proxy}
    if not recs:
        return DetectorReport(settings=settings)
    pop = [float(r["population"][proxy]) if isinstance(r.get("population"), Mapping) else float(r[proxy]) for r in recs]
    gfer = _series(recs, "gfer_raw")
    return DetectorReport(
        escape=detect_escape(gfer, pop, delta, k_escape) if len(recs) >= 2 else [],
        runaway=detect_runaway(gfer, pop, threshold, k_runaway) if len(recs) >= 3 else [],
        giant_component=[float(r.get("giant_component", 0.0)) for r in recs],
        population=pop,
        settings=settings,
    )
