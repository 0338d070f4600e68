from __future__ import annotations

import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from oracles import cmi_bruteforce

from coevo.core import AgentSpec, KernelRule, MachineSpec, MessageGraph, TableRule, identity_rule, ring_rule
from coevo.engine import SeedPlan
from coevo.evolution import EvolutionPolicy
from coevo.optimize import (
    EncodingSpace,
    EnvironmentFamily,
    ObjectiveSpec,
    evaluate_agents,
    evaluate_policy,
    inner_optimize,
    outer_adversarial,
    outer_random,
    responsiveness,
    softmax,
)


def one_bit(rule, sigma=0.0, ext=(2,)):
    return AgentSpec((MachineSpec(2, rule),), MessageGraph(1), sigma=sigma, ext_cards=ext)


def copy_society():
    return one_bit(ring_rule(1, 0, state=(0, [1], [], 0)))


IDENTITY_ENV = one_bit(identity_rule(1, 0))
TWO_STEP = ObjectiveSpec(horizon=2, gamma=1.0)


def all_binary_tables():
    keys = [(x, (e,), ()) for x in range(2) for e in range(2)]
    for outs in itertools.product(range(2), repeat=4):
        yield TableRule({k: (o, 0) for k, o in zip(keys, outs)}, (0,))


def test_exhaustive_table_optimum_is_one_bit():
    scores = [evaluate_agents(one_bit(t), IDENTITY_ENV, TWO_STEP, None, SeedPlan(0)) for t in all_binary_tables()]
    assert max(scores) == pytest.approx(1.0, abs=1e-12)
    # exactly the two rules that copy or negate the observation reach it
    assert sum(abs(s - 1.0) < 1e-9 for s in scores) == 2


@pytest.mark.parametrize("seed", range(3))
def test_inner_optimize_finds_copy(seed):
    space = EncodingSpace(copy_society(), include_rho=False)
    res = inner_optimize(space, IDENTITY_ENV, TWO_STEP, 200, np.random.default_rng(seed))
    assert res.score == pytest.approx(1.0, abs=1e-9)
    soc, _ = space.decode(res.encoding)
    st = soc.machines[0].rule.state
    assert st.b[0] % 2 == 1 and st.a % 2 == 0


def test_encode_decode_roundtrip():
    rng = np.random.default_rng(0)
    space = EncodingSpace(copy_society(), include_rho=True)
    for _ in range(20):
        enc = space.random(rng)
        soc, rho = space.decode(enc)
        again = space.encode(soc, rho)
        assert again.coeffs == enc.coeffs
        assert sum(rho.values()) == pytest.approx(1.0, abs=1e-12)


def test_softmax_sums_to_one():
    d = softmax([0.3, -1.0, 2.0, 0.0, 0.0, 5.0, -3.0])
    assert abs(sum(d.values()) - 1.0) <= 1e-12


def test_gamma_zero_is_first_iteration():
    soc = copy_society()
    obj0 = ObjectiveSpec(horizon=5, gamma=0.0)
    first = evaluate_agents(soc, IDENTITY_ENV, ObjectiveSpec(horizon=1), None, SeedPlan(1))
    assert evaluate_agents(soc, IDENTITY_ENV, obj0, None, SeedPlan(1)) == first


def test_evaluation_deterministic_sampled():
    obj = ObjectiveSpec(horizon=3, harvest=replace(ObjectiveSpec().harvest, mode="mi_plugin", replicates=500))
    space = EncodingSpace(copy_society(), include_rho=False)
    enc = space.random(np.random.default_rng(4))
    noisy_env = one_bit(identity_rule(1, 0), sigma=0.3)
    a = evaluate_policy(enc, space, noisy_env, obj, SeedPlan(9))
    b = evaluate_policy(enc, space, noisy_env, obj, SeedPlan(9))
    assert a == b


def test_sigma_one_scores_zero():
    env = one_bit(ring_rule(1, 0, state=(0, [1], [], 0)), sigma=1.0)
    space = EncodingSpace(replace(copy_society(), sigma=1.0), include_rho=False)
    rng = np.random.default_rng(2)
    for _ in range(10):
        assert evaluate_policy(space.random(rng), space, env, TWO_STEP, SeedPlan(0)) == pytest.approx(0.0, abs=1e-12)


def test_budget_one_and_monotone_curve():
    space = EncodingSpace(copy_society(), include_rho=False)
    res = inner_optimize(space, IDENTITY_ENV, TWO_STEP, 1, np.random.default_rng(0))
    assert len(res.history) == 1 and res.score == res.history[0]["score"]
    res = inner_optimize(space, IDENTITY_ENV, TWO_STEP, 60, np.random.default_rng(1))
    curve = res.best_curve()
    assert all(a <= b for a, b in zip(curve, curve[1:]))
    assert len(res.history) == 60


def test_evolving_objective_uses_policy():
    space = EncodingSpace(copy_society(), include_rho=True)
    obj = ObjectiveSpec(horizon=2, policy=EvolutionPolicy(floors={"r_s": 1e6, "r_e": 1e6}))
    enc = space.random(np.random.default_rng(3))
    assert math.isfinite(evaluate_policy(enc, space, IDENTITY_ENV, obj, SeedPlan(0)))


# -- environments --------------------------------------------------------------


def test_edge_probability_extremes():
    rng = np.random.default_rng(0)
    assert all(not a.graph.edges for a in outer_random(EnvironmentFamily(5, edge_p=0.0), 5, rng))
    for a in outer_random(EnvironmentFamily(5, edge_p=1.0), 5, rng):
        assert len(a.graph.edges) == 20


def test_mean_edge_count_binomial():
    n, p, samples = 6, 0.3, 1000
    envs = outer_random(EnvironmentFamily(n, edge_p=p), samples, np.random.default_rng(1))
    counts = np.array([len(a.graph.edges) for a in envs])
    m = n * (n - 1)
    se = math.sqrt(m * p * (1 - p) / samples)
    assert abs(counts.mean() - p * m) < 3 * se


def test_responsiveness_examples():
    assert responsiveness(IDENTITY_ENV) == 0.0
    copy3 = AgentSpec((MachineSpec(3, ring_rule(1, 0, state=(0, [1], [], 0))),), MessageGraph(1), ext_cards=(3,))
    assert responsiveness(copy3) == pytest.approx(math.log2(3), abs=1e-12)


def test_responsiveness_two_state_toy_vs_bruteforce():
    # noisy XOR: x' = x ^ e with probability 0.8, otherwise x
    rows = {}
    for x in range(2):
        for e in range(2):
            rows[(x, (e,), ())] = (((x ^ e, 0), 0.8), ((x, 0), 0.2))
    env = one_bit(KernelRule(rows, (0,)))

    def dist(x, e):
        out = {}
        out[x ^ e] = out.get(x ^ e, 0.0) + 0.8
        out[x] = out.get(x, 0.0) + 0.2
        return out

    want = cmi_bruteforce(dist, [0, 1], [0, 1])
    assert responsiveness(env) == pytest.approx(want, abs=1e-9)


def test_responsiveness_monte_carlo_close_to_exact():
    copy2 = one_bit(ring_rule(1, 0, state=(0, [1], [], 0)))
    assert responsiveness(copy2, limit=0, R=50_000) == pytest.approx(1.0, abs=0.01)


# -- adversarial loop ----------------------------------------------------------


def test_single_round_is_inner_optimize():
    space = EncodingSpace(copy_society(), include_rho=False)
    env = one_bit(ring_rule(1, 0, state=(1, [1], [], 0)))
    a = outer_adversarial(env, space, TWO_STEP, 1, 0.0, np.random.default_rng(5), inner_budget=30)
    rng = np.random.default_rng(5)
    seeds = SeedPlan(int(rng.integers(2**63)))
    b = inner_optimize(space, env, TWO_STEP, 30, rng, seeds=seeds)
    assert a.society == b.encoding
    assert a.trace[-1]["value"] == b.score


def test_adversary_moves_non_increasing_and_collapse():
    space = EncodingSpace(copy_society(), include_rho=False)
    env = one_bit(ring_rule(1, 0, state=(0, [1], [], 0)))
    res = outer_adversarial(env, space, TWO_STEP, 2, 0.0, np.random.default_rng(0),
                            inner_budget=40, adversary_budget=40)
    adv = [t for t in res.trace if t["phase"] == "adversary"]
    assert adv
    for t in adv:
        assert all(a >= b for a, b in zip(t["moves"], t["moves"][1:]))
    # with no responsiveness floor the adversary reaches the no-information baseline
    assert adv[0]["value"] == pytest.approx(0.0, abs=1e-9)


def test_responsiveness_floor_is_respected():
    space = EncodingSpace(copy_society(), include_rho=False)
    env = one_bit(ring_rule(1, 0, state=(0, [1], [], 0)))
    res = outer_adversarial(env, space, TWO_STEP, 2, 0.5, np.random.default_rng(0),
                            inner_budget=20, adversary_budget=20)
    assert not res.infeasible
    assert responsiveness(res.environment) >= 0.5
