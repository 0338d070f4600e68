from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coevo.core import MessageGraph
from coevo.detectors import (
    analyze_log,
    crossing_point,
    detect_escape,
    detect_runaway,
    er_point,
    giant_component_fraction,
)

T = 8


def test_constant_gives_no_flags():
    assert detect_escape([1.0] * T, [3.0] * T, 0.0, 1) == []
    assert detect_runaway([1.0] * T, [3.0] * T, 0.0, 1) == []


def test_doubling_gfer_flags_from_third_step():
    gfer = [2.0**t for t in range(T)]
    # steps t -> t+1 for t = 0..6 all qualify; the run reaches k=3 at t=2
    assert detect_escape(gfer, [5.0] * T, 0.05, 3) == [2, 3, 4, 5, 6]


def test_both_doubling_is_flat_per_capita():
    x = [2.0**t for t in range(T)]
    assert detect_escape(x, x, 0.05, 1) == []


def test_zero_gfer_breaks_run():
    gfer = [1, 2, 4, 0, 8, 16, 32, 64]
    # steps 2 -> 3 and 3 -> 4 are undefined, so the run restarts at t = 4
    assert detect_escape(gfer, [1] * 8, 0.0, 2) == [1, 5, 6]


def test_runaway_examples():
    quad = [2.0 ** (t * t) for t in range(T)]
    # second difference of t^2 is 2 everywhere; run of k=2 first completes at t=2
    assert detect_runaway(quad, [1.0] * T, 0.5, 2) == [2, 3, 4, 5, 6]
    assert detect_runaway([3.0**t for t in range(T)], [1.0] * T, 0.1, 1) == []
    assert detect_runaway([0.5**t for t in range(T)], [1.0] * T, 0.1, 1) == []


@given(st.lists(st.floats(0.01, 100.0), min_size=3, max_size=20), st.integers(1, 4))
def test_longer_runs_flag_subsets(gfer, k):
    pop = [1.0] * len(gfer)
    for detect, arg in ((detect_escape, 0.05), (detect_runaway, 0.1)):
        short, long = detect(gfer, pop, arg, k), detect(gfer, pop, arg, k + 1)
        assert set(long) <= set(short)
        assert short == sorted(short)


def test_giant_component_extremes():
    assert giant_component_fraction(MessageGraph(5)) == pytest.approx(0.2)
    complete = tuple((u, v) for u in range(5) for v in range(5) if u != v)
    assert giant_component_fraction((5, complete)) == 1.0
    assert giant_component_fraction((6, [(0, 1), (2, 1), (3, 4)])) == pytest.approx(0.5)


def test_er_point_deterministic_and_sweep_monotone_trend():
    a = er_point(100, 1.0, 20, master=3, index=4)
    assert a == er_point(100, 1.0, 20, master=3, index=4)
    lo, hi = er_point(100, 0.3, 20), er_point(100, 3.0, 20, index=1)
    assert lo["median"] < hi["median"]


def test_crossing_interpolates():
    rows = [{"mean_degree": 1.0, "median": 0.2}, {"mean_degree": 2.0, "median": 0.6}]
    assert crossing_point(rows) == pytest.approx(1.75)
    assert crossing_point([{"mean_degree": 1.0, "median": 0.1}]) is None


def test_analyze_log_empty_and_records():
    assert analyze_log([]).escape == []
    recs = [{"kind": "iteration", "gfer_raw": 2.0**t, "population": {"n": 4.0}} for t in range(T)]
    rep = analyze_log(recs, delta=0.05, k_escape=3)
    assert rep.escape == [2, 3, 4, 5, 6]
    assert rep.population == [4.0] * T
    assert analyze_log(recs).to_dict() == analyze_log(list(recs)).to_dict()
    assert np.isfinite(rep.giant_component).all()
