"""Symmetric noisy observation channel.

Each component is transmitted independently: with probability ``1 - sigma``
the true symbol passes through, otherwise it is replaced by a uniform draw
over that component's full alphabet (which may hit the true symbol).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from coevo.core import ContractViolation


@dataclass(frozen=True)
class ObservationChannel:
    sigma: float
    alphabet: tuple[int, ...]

    def __post_init__(self):
        if not (0.0 <= self.sigma <= 1.0):
            raise ValueError(f"sigma must lie in [0, 1], got {self.sigma}")
        object.__setattr__(self, "alphabet", tuple(int(k) for k in self.alphabet))

    @property
    def r(self) -> float:
        """Precision ``1/sigma``; infinite for a noiseless channel."""
        return math.inf if self.sigma == 0 else 1.0 / self.sigma


def transition_matrix(sigma: float, k: int) -> np.ndarray:
    """``P[i, j] = P(output j | input i)`` for one component."""
    return (1.0 - sigma) * np.eye(k) + sigma / k


def observe(joint_state: Sequence[int], channel: ObservationChannel, rng: np.random.Generator) -> tuple[int, ...]:
    if len(joint_state) != len(channel.alphabet):
        raise ContractViolation(
            f"state has {len(joint_state)} components, channel alphabet has {len(channel.alphabet)}"
        )
    n = len(joint_state)
    u = rng.random((2, n))
    out = observe_batch(np.asarray(joint_state, dtype=np.int64)[None, :], channel, u[0][None, :], u[1][None, :])
    return tuple(int(s) for s in out[0])


def observe_batch(
    states: np.ndarray, channel: ObservationChannel, u_replace: np.ndarray, u_symbol: np.ndarray
) -> np.ndarray:
    """Vectorised channel over ``(R, n)`` states with caller-supplied uniforms."""
    if states.shape[1] != len(channel.alphabet):
        raise ContractViolation("alphabet mismatch")
    if channel.sigma == 0.0:
        return states.copy()
    k = np.asarray(channel.alphabet, dtype=np.int64)
    draws = np.minimum((u_symbol * k).astype(np.int64), k - 1)
    return np.where(u_replace < channel.sigma, draws, states)


def channel_capacity_bits(channel: ObservationChannel | float, k: int) -> float:
    """Mutual information of one component under a uniform input, in bits."""
    if k < 2:
        raise ValueError("alphabet size must be >= 2")
    sigma = channel.sigma if isinstance(channel, ObservationChannel) else float(channel)
    same = 1.0 - sigma + sigma / k
    other = sigma / k
    h_row = -same * math.log2(same) if same > 0 else 0.0
    if other > 0:
        h_row -= (k - 1) * other * math.log2(other)
    return max(0.0, math.log2(k) - h_row)
