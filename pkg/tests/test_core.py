import itertools
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbthresh import core
from rbthresh.exact import counterexample_two_type
from conftest import random_agent


def type2():
    return counterexample_two_type().agents[2]


def test_agent_validation():
    P = np.array([[[1, 0], [0, 1]], [[0.5, 0.5], [0.5, 0.5]]])
    core.AgentModel(P, np.array([0.0, 1.0]))
    bad = P.copy()
    bad[0, 0] = [0.6, 0.5]
    with pytest.raises(core.InstanceError, match="sums to"):
        core.AgentModel(bad, np.array([0.0, 1.0]))
    with pytest.raises(core.InstanceError):
        core.AgentModel(P, np.array([0.0, np.inf]))
    with pytest.raises(core.InstanceError):
        core.AgentModel(P[:, :, :1], np.array([0.0]))
    neg = P.copy()
    neg[1, 0] = [1.5, -0.5]
    with pytest.raises(core.InstanceError):
        core.AgentModel(neg, np.array([0.0, 1.0]))


def test_instance_validation():
    a = type2()
    with pytest.raises(core.InstanceError):
        core.Instance((a, a), budget=3, horizon=5)
    with pytest.raises(core.InstanceError):
        core.Instance((a, a), budget=0, horizon=5)
    with pytest.raises(core.InstanceError):
        core.Instance((a, a), budget=1, horizon=0)
    three = core.gen_multi_state_instance(1, 3, 0).agents[0]
    with pytest.raises(core.InstanceError, match="same state space"):
        core.Instance((a, three), budget=1, horizon=5)


def test_noise_model():
    with pytest.raises(core.InstanceError):
        core.NoiseModel("deterministic", 0.5)
    with pytest.raises(core.InstanceError):
        core.NoiseModel("gaussian", -1.0)
    with pytest.raises(core.InstanceError):
        core.NoiseModel("laplace", 1.0)
    assert core.NoiseModel("gaussian", [0.1, 0.2]).std_vector(2).tolist() == [0.1, 0.2]
    with pytest.raises(core.InstanceError):
        core.Instance((type2(),), 1, 3, noise=core.NoiseModel("gaussian", [1.0, 2.0, 3.0]))


def test_incremental_reward_type2():
    a = type2()
    assert core.incremental_reward(a, 0) == pytest.approx(0.75, abs=1e-15)
    assert core.incremental_reward(a, 1) == pytest.approx(0.75, abs=1e-15)
    with pytest.raises(IndexError):
        core.incremental_reward(a, 2)


def test_incremental_reward_no_effect_action():
    rng = np.random.default_rng(1)
    u = rng.random((3, 3))
    P = u / u.sum(axis=1, keepdims=True)
    a = core.AgentModel(np.stack([P, P]), rng.normal(size=3))
    assert all(core.incremental_reward(a, s) == 0.0 for s in range(3))


def test_incremental_reward_matches_exact_sum():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = random_agent(rng, 3)
        for s in range(3):
            exact = sum((Fraction(p1) - Fraction(p0)) * Fraction(r) for p1, p0, r in
                        zip(a.transitions[1, s], a.transitions[0, s], a.rewards))
            assert abs(core.incremental_reward(a, s) - float(exact)) < 1e-14


def test_good_set_examples():
    inst = core.Instance((type2(),), 1, 5, threshold=-np.inf)
    assert len(core.good_set(inst)) == 2
    gs = core.good_set(core.Instance((type2(),), 1, 5, threshold=0.5))
    assert gs.pairs == {(0, 0), (0, 1)}
    assert gs.delta == pytest.approx(0.25, abs=1e-15)
    assert np.allclose(gs.gaps, 0.25)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), M=st.integers(1, 4), S=st.integers(2, 4),
       gamma=st.floats(-2, 2))
def test_good_set_enumeration_and_antitone(seed, M, S, gamma):
    inst = core.gen_multi_state_instance(M, S, seed, threshold=gamma)
    gs = core.good_set(inst)
    brute = {(m, s) for m in range(M) for s in range(S)
             if core.incremental_reward(inst.agents[m], s) >= gamma}
    assert gs.pairs == brute
    if brute:
        assert gs.delta == pytest.approx(min(core.incremental_reward(inst.agents[m], s) - gamma
                                             for m, s in brute))
    higher = core.good_set(inst.with_threshold(gamma + 0.3))
    assert higher.pairs <= gs.pairs


def test_good_set_at_max_is_argmax():
    inst = core.gen_multi_state_instance(3, 3, 5)
    top = float(inst.incremental.max())
    gs = core.good_set(inst.with_threshold(top))
    assert gs.pairs == {tuple(map(int, ix)) for ix in np.argwhere(inst.incremental == top)}


def test_assumption2_examples():
    inst = core.gen_two_state_instance(4, 0, budget=4, threshold=-np.inf)
    assert core.check_assumption2(inst) == (True, None)
    good = type2()
    P = np.array([[[1, 0], [0, 1]], [[1, 0], [1, 0]]], dtype=float)   # I(1) = -1
    bad = core.AgentModel(P, np.array([0.0, 1.0]))
    ok, _ = core.check_assumption2(core.Instance((good, bad), 1, 5, threshold=0.0))
    assert ok
    ok, witness = core.check_assumption2(core.Instance((good, bad), 2, 5, threshold=0.0))
    assert not ok and witness == (0, 1)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), M=st.integers(1, 3), S=st.integers(2, 3),
       gamma=st.floats(-1, 1), data=st.data())
def test_assumption2_matches_exhaustive(seed, M, S, gamma, data):
    B = data.draw(st.integers(1, M))
    inst = core.gen_multi_state_instance(M, S, seed, budget=B, threshold=gamma)
    I = inst.incremental
    brute = all(sum(I[m, js[m]] >= gamma for m in range(M)) >= B
                for js in itertools.product(range(S), repeat=M))
    ok, witness = core.check_assumption2(inst)
    assert ok == brute
    if not ok:
        assert sum(I[m, witness[m]] >= gamma for m in range(M)) < B


def test_two_state_generator():
    a = core.gen_two_state_instance(3, 11, homogeneous=True)
    assert a.agents[0] == a.agents[1] == a.agents[2]
    assert core.gen_two_state_instance(5, 4) == core.gen_two_state_instance(5, 4)
    assert core.gen_two_state_instance(5, 4) != core.gen_two_state_instance(5, 5)
    assert np.array_equal(a.R[0], [0.0, 1.0])


def test_two_state_generator_uniform_mean():
    inst = core.gen_two_state_instance(2500, 3)
    entries = inst.P[:, :, :, 1].ravel()
    assert entries.size == 10_000
    assert abs(entries.mean() - 0.5) < 0.02


def test_multi_state_generator_rows():
    inst = core.gen_multi_state_instance(500, 10, 2)
    rows = inst.P.reshape(-1, 10)
    assert rows.shape[0] >= 10_000
    assert np.all(np.abs(rows.sum(axis=1) - 1) <= 1e-12)
    assert np.all(rows > 0)
    assert np.array_equal(inst.R[0], np.arange(10.0))


def test_multi_state_differs_from_two_state():
    assert core.gen_multi_state_instance(3, 2, 0) != core.gen_two_state_instance(3, 0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_regret_generator(seed):
    ri = core.gen_regret_instance(seed)
    inst = ri.instance
    I = [[core.incremental_reward(a, s) for s in (0, 1)] for a in inst.agents]
    assert I[0][1] >= I[0][0] >= I[1][1] >= I[1][0]
    gap = I[1][1] - I[1][0]
    assert gap >= 0.15
    for th, g, d in zip(ri.thetas, ri.gammas, ri.deltas):
        assert g == pytest.approx(th * I[1][1] + (1 - th) * I[1][0], abs=1e-14)
        assert d == pytest.approx(I[1][1] - g, abs=1e-14)
    assert ri.deltas[1] == pytest.approx(gap / 2) and ri.deltas[1] >= 0.075
    assert ri.deltas[2] == pytest.approx(0.1 * gap)
    assert core.check_assumption2(ri.for_theta(0.9))[0]


def test_regret_generator_budget_exhausted():
    with pytest.raises(core.GenerationError):
        core.gen_regret_instance(0, min_gap=2.0, max_draws=50)


def test_json_round_trip_exact():
    inst = core.gen_multi_state_instance(3, 4, 9, budget=2, horizon=17, threshold=-0.3,
                                         noise=core.NoiseModel("gaussian", 0.5))
    text = core.instance_to_json(inst)
    back = core.instance_from_json(text)
    assert back == inst
    assert core.instance_to_json(back) == text
    d = json.loads(text)
    assert set(d) == {"schema_version", "M", "S", "B", "T", "gamma", "noise", "agents"}
    d["schema_version"] = 99
    with pytest.raises(core.InstanceError):
        core.instance_from_dict(d)


def test_derive_seed():
    s = core.derive_seed(42, "exp", 1, 2, "eps-gt")
    assert s == core.derive_seed(42, "exp", 1, 2, "eps-gt")
    assert 0 <= s < 2 ** 64
    others = {core.derive_seed(42, "exp", 1, 2, "wiql"), core.derive_seed(42, "exp", 1, 3, "eps-gt"),
              core.derive_seed(43, "exp", 1, 2, "eps-gt"), core.derive_seed(42, "exp", 2, 1, "eps-gt")}
    assert s not in others and len(others) == 4
    spec = core.SeedSpec(42, ("exp",)).child(1, 2, "eps-gt")
    assert spec.seed == s
    with pytest.raises(ValueError):
        core.derive_seed(1, -1)


def test_derived_streams_uncorrelated():
    a = core.make_rng(0, "x", 0).standard_normal(20000)
    b = core.make_rng(0, "x", 1).standard_normal(20000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / np.sqrt(20000)


def test_check_action():
    assert core.check_action([1, 0, 1], 2, 3).sum() == 2
    for bad in ([1, 1, 1], [2, 0, 0], [1, 0], [1, -1, 2]):
        with pytest.raises(ValueError):
            core.check_action(bad, 2, 3)
