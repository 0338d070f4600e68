"""Gross free energy harvest rate (GFER).

Two harvest families are provided:

* mutual information ``I(X^E_tau; X^S_0)`` between the society's state at the
  start of an iteration and the environment's state at its end, computed
  either exactly (by enumeration) or by the plug-in estimator on an ensemble;
* Kelly-style multiplicative winnings, where the society splits a bankroll
  over the outcomes of an IID winnings variable.

Harvest can be capped by an environment resource store (:func:`deplete`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from coevo.channel import ObservationChannel
from coevo.core import AgentSpec
from coevo.engine import (
    DEFAULT_ENUMERATION_LIMIT,
    IterationContext,
    IterationOutcome,
    exact_joint,
    outcome_joint,
)


@dataclass
class HarvestReport:
    gfer_raw: float
    gfer_effective: float
    estimator: str  # "exact", "plugin(R)" or "kelly"
    store_before: float | None = None
    store_after: float | None = None

    def to_dict(self) -> dict:
        return {
            "gfer_raw": self.gfer_raw,
            "gfer_effective": self.gfer_effective,
            "estimator": self.estimator,
            "store_before": self.store_before,
            "store_after": self.store_after,
        }


# --------------------------------------------------------------------------
# mutual information
# --------------------------------------------------------------------------


def _as_matrix(joint) -> np.ndarray:
    if isinstance(joint, Mapping):
        if not joint:
            return np.zeros((1, 1))
        rows = {a for a, _ in joint}
        cols = {b for _, b in joint}
        ri = {a: i for i, a in enumerate(sorted(rows))}
        ci = {b: j for j, b in enumerate(sorted(cols))}
        mat = np.zeros((len(ri), len(ci)))
        for (a, b), c in joint.items():
            mat[ri[a], ci[b]] += c
        return mat
    return np.asarray(joint, dtype=float)


def _entropy_bits(counts: np.ndarray, miller_madow: bool = False) -> float:
    counts = counts[counts > 0]
    n = counts.sum()
    if n <= 0:
        return 0.0
    p = counts / n
    h = float(-(p * np.log2(p)).sum())
    if miller_madow:
        h += (len(counts) - 1) / (2.0 * n * math.log(2))
    return h


def mutual_information_bits(joint, miller_madow: bool = False) -> float:
    """``H(S) + H(E) - H(S, E)`` of a joint table (counts or probabilities)."""
    mat = _as_matrix(joint)
    hs = _entropy_bits(mat.sum(axis=1), miller_madow)
    he = _entropy_bits(mat.sum(axis=0), miller_madow)
    hse = _entropy_bits(mat.reshape(-1), miller_madow)
    return max(0.0, hs + he - hse)


def mi_plugin(counts, miller_madow: bool = False) -> float:
    """Plug-in estimate from joint frequency counts (e.g. :func:`ensemble_rollout`)."""
    mat = _as_matrix(counts)
    if mat.sum() < 1:
        raise ValueError("need at least one count")
    return mutual_information_bits(mat, miller_madow)


def mi_exact(
    society: AgentSpec,
    environment: AgentSpec,
    boundary: Sequence[tuple[Sequence[int], Sequence[int], float]],
    channels: tuple[ObservationChannel, ObservationChannel] | None = None,
    limit: int = DEFAULT_ENUMERATION_LIMIT,
) -> float:
    """Exact ``I(X^E_tau; X^S_0)`` in bits over a boundary distribution.

    Every boundary state, channel outcome and kernel branch is enumerated.
    """
    ctx = IterationContext(society, environment, boundary, channels=channels, limit=limit)
    return mutual_information_bits(exact_joint(ctx))


def outcome_mi(outcome: IterationOutcome, society: AgentSpec, environment: AgentSpec,
               miller_madow: bool = False) -> float:
    """MI harvest of a finished iteration (exact weights or replicate counts)."""
    joint = outcome_joint(outcome, society, environment)
    return mutual_information_bits(joint, miller_madow=miller_madow and not outcome.exact)


def harvest_from_states(start_s, start_e, end_s, end_e, weights=None) -> float:
    """General harvest signature over boundary and ending joint states.

    The MI harvest only uses ``start_s`` and ``end_e``; the other two are
    accepted so alternative harvest functions can share the call shape.
    """
    start_s = np.asarray(start_s)
    end_e = np.asarray(end_e)
    if weights is None:
        weights = np.full(start_s.shape[0], 1.0 / start_s.shape[0])
    s = np.unique(start_s.reshape(len(start_s), -1), axis=0, return_inverse=True)[1].reshape(-1)
    e = np.unique(end_e.reshape(len(end_e), -1), axis=0, return_inverse=True)[1].reshape(-1)
    mat = np.zeros((s.max() + 1, e.max() + 1))
    np.add.at(mat, (s, e), weights)
    return mutual_information_bits(mat)


# --------------------------------------------------------------------------
# Kelly harvest
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WinningsModel:
    """IID winnings outcome ``w`` with probabilities ``p`` and payout ``odds``.

    ``side_channel[w, y] = P(y | w)`` describes an optional noisy observation.
    """

    p: tuple[float, ...]
    odds: tuple[float, ...]
    side_channel: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "p", tuple(float(v) for v in self.p))
        object.__setattr__(self, "odds", tuple(float(v) for v in self.odds))
        if len(self.p) != len(self.odds):
            raise ValueError("p and odds must have the same length")
        if abs(sum(self.p) - 1.0) > 1e-12 or min(self.p) < 0:
            raise ValueError("p must be a probability vector")
        if min(self.odds) <= 0:
            raise ValueError("odds must be positive")

    @property
    def k(self) -> int:
        return len(self.p)

    def posterior(self, y: int) -> np.ndarray:
        if self.side_channel is None:
            return np.asarray(self.p)
        lik = np.asarray(self.side_channel)[:, y]
        post = np.asarray(self.p) * lik
        return post / post.sum()

    def side_information_bits(self) -> float:
        """``I(W; Y)`` for the side channel (0 without one)."""
        if self.side_channel is None:
            return 0.0
        joint = np.asarray(self.p)[:, None] * np.asarray(self.side_channel)
        return mutual_information_bits(joint)


def symmetric_side_channel(k: int, sigma: float) -> tuple[tuple[float, ...], ...]:
    """Side channel with the same uniform-replacement noise as observations."""
    mat = (1.0 - sigma) * np.eye(k) + sigma / k
    return tuple(tuple(float(v) for v in row) for row in mat)


def _check_distribution(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError("expected a probability vector")
    return p


def kelly_allocation(p: Sequence[float], B: float) -> np.ndarray:
    """Bet ``b = B * p``; the odds do not enter."""
    if B <= 0:
        raise ValueError("bankroll must be positive")
    return B * _check_distribution(p)


def kelly_with_side_info(posterior: Sequence[float], B: float) -> np.ndarray:
    """Bet in proportion to ``P(w | y)`` for the realised observation ``y``."""
    return kelly_allocation(posterior, B)


def kelly_growth_rate(model: WinningsModel, b: Sequence[float]) -> float:
    """Expected ``log2`` wealth growth per round for allocation ``b``."""
    b = np.asarray(b, dtype=float)
    if (b < 0).any():
        raise ValueError("allocation must be nonnegative")
    B = b.sum()
    total = 0.0
    for pw, ow, bw in zip(model.p, model.odds, b):
        if pw == 0:
            continue
        if bw == 0:
            return -math.inf
        total += pw * math.log2(ow * bw / B)
    return total


def realized_log_growth(w: np.ndarray, fractions: np.ndarray, odds: Sequence[float]) -> np.ndarray:
    """Per-row ``log2(odds_w * f_w)`` for outcomes ``w`` and fraction rows ``fractions``."""
    odds = np.asarray(odds, dtype=float)
    f = fractions[np.arange(len(w)), w]
    with np.errstate(divide="ignore"):
        return np.log2(odds[w] * f)


# --------------------------------------------------------------------------
# depletion
# --------------------------------------------------------------------------


def deplete(store: float, gfer_raw: float) -> tuple[float, float]:
    """Cap the harvest at what the store holds; negative harvests take nothing."""
    if store < 0:
        raise ValueError("store must be nonnegative")
    zero = store - store  # keeps exact types (e.g. Fraction) exact
    eff = min(max(gfer_raw, zero), store)
    return eff, store - eff
