from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import COPY_SIGMA_HALF_MI, KELLY_07_03_EVEN

from coevo.engine import IterationContext, SeedPlan, ensemble_rollout, point_boundary
from coevo.harvest import (
    WinningsModel,
    deplete,
    harvest_from_states,
    kelly_allocation,
    kelly_growth_rate,
    kelly_with_side_info,
    mi_exact,
    mi_plugin,
    mutual_information_bits,
    realized_log_growth,
    symmetric_side_channel,
)


def test_mi_known_tables():
    assert mutual_information_bits(np.eye(2) / 2) == 1.0
    assert mutual_information_bits(np.ones((2, 2)) / 4) == 0.0
    assert mutual_information_bits({(0, 0): 3, (1, 1): 3}) == 1.0


def test_noisy_copy_mi_frozen(copy_env, identity_env):
    from dataclasses import replace

    env = replace(copy_env, sigma=0.5)
    boundary = [((a,), (b,), 0.25) for a in range(2) for b in range(2)]
    assert mi_exact(identity_env, env, boundary) == pytest.approx(COPY_SIGMA_HALF_MI, abs=1e-12)


def test_plugin_converges(copy_env, identity_env):
    from dataclasses import replace

    env = replace(copy_env, sigma=0.5)
    boundary = [((a,), (b,), 0.25) for a in range(2) for b in range(2)]
    counts = ensemble_rollout(IterationContext(identity_env, env, boundary, seeds=SeedPlan(1)), 100_000)
    assert mi_plugin(counts) == pytest.approx(COPY_SIGMA_HALF_MI, abs=0.01)
    assert sum(counts.values()) == 100_000


def test_point_boundary_gives_zero(copy_env, identity_env):
    counts = ensemble_rollout(IterationContext(identity_env, copy_env, point_boundary((1,), (0,)), seeds=SeedPlan(2)), 50)
    assert mi_plugin(counts) == 0.0


def test_miller_madow_shrinks_independent_estimate():
    rng = np.random.default_rng(0)
    counts = np.zeros((4, 4))
    np.add.at(counts, (rng.integers(4, size=200), rng.integers(4, size=200)), 1)
    assert mi_plugin(counts, miller_madow=True) < mi_plugin(counts)


def test_harvest_from_states_matches_table():
    s = np.array([[0], [1], [0], [1]])
    e = np.array([[1], [0], [1], [0]])
    assert harvest_from_states(s, None, None, e) == 1.0


# -- Kelly -------------------------------------------------------------------


def test_kelly_growth_frozen():
    m = WinningsModel((0.7, 0.3), (2.0, 2.0))
    assert kelly_growth_rate(m, kelly_allocation(m.p, 1.0)) == pytest.approx(KELLY_07_03_EVEN, abs=1e-12)
    assert kelly_growth_rate(m, [1.0, 0.0]) == -math.inf


def test_kelly_ignores_odds():
    assert np.allclose(kelly_allocation((0.2, 0.8), 5.0), [1.0, 4.0])


@given(st.lists(st.floats(0.05, 1.0), min_size=2, max_size=4), st.floats(0.0, 1.0))
def test_proportional_beats_perturbation(weights, mix):
    p = np.asarray(weights) / sum(weights)
    m = WinningsModel(tuple(p / p.sum()), tuple([3.0] * len(p)))
    q = mix * np.ones(len(p)) / len(p) + (1 - mix) * np.roll(p, 1)
    assert kelly_growth_rate(m, m.p) >= kelly_growth_rate(m, q) - 1e-12


def test_side_info_gain_equals_mutual_information():
    m = WinningsModel((0.5, 0.5), (2.0, 2.0), symmetric_side_channel(2, 0.2))
    # expected growth with posterior bets minus growth without side information
    gain = 0.0
    chan = np.asarray(m.side_channel)
    for w in range(2):
        for y in range(2):
            pwy = m.p[w] * chan[w, y]
            gain += pwy * (math.log2(m.odds[w] * m.posterior(y)[w]) - math.log2(m.odds[w] * m.p[w]))
    assert gain == pytest.approx(m.side_information_bits(), abs=1e-12)
    assert np.allclose(kelly_with_side_info(m.posterior(0), 1.0), m.posterior(0))


def test_realized_log_growth_rows():
    w = np.array([0, 1])
    f = np.array([[0.5, 0.5], [0.25, 0.75]])
    assert np.allclose(realized_log_growth(w, f, (2.0, 4.0)), [0.0, math.log2(3.0)])


# -- depletion ---------------------------------------------------------------


def test_deplete_caps_and_floors():
    assert deplete(2.0, 0.5) == (0.5, 1.5)
    assert deplete(0.25, 0.5) == (0.25, 0.0)
    assert deplete(1.0, -0.3) == (0.0, 1.0)


@given(st.lists(st.floats(-1.0, 3.0, allow_nan=False), max_size=40), st.floats(0.0, 20.0))
def test_deplete_fraction_exact(harvests, store0):
    store = Fraction(store0)
    total = Fraction(0)
    for g in harvests:
        eff, store = deplete(store, Fraction(g))
        assert eff >= 0 and store >= 0
        total += eff
    assert total == Fraction(store0) - store
