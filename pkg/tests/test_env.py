import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbthresh import core, env
from rbthresh.env import BudgetError, Observation, rollout, simulate
from rbthresh.exact import actor_policy, exact_policy_value
from rbthresh.policies import WIQL, EpsGreedyThresholding, OracleGreedy, RandomPolicy, ReferencePolicy
from rbthresh.whittle import OracleWhittle


def policy_factories():
    return {
        "random": RandomPolicy.for_instance,
        "oracle-greedy": OracleGreedy.for_instance,
        "reference": ReferencePolicy.for_instance,
        "eps-gt": EpsGreedyThresholding.for_instance,
        "wiql": WIQL.for_instance,
        "oracle-whittle": OracleWhittle.for_instance,
    }


def test_deterministic_row():
    P1 = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    P0 = np.eye(3)
    a = core.AgentModel(np.stack([P0, P1]), np.array([0.0, 1.0, 2.0]))
    inst = core.Instance((a, a), budget=1, horizon=4)
    rng = np.random.default_rng(0)
    for _ in range(50):
        out = env.step(inst, [0, 1], [1, 0], rng)
        assert out.next_state.tolist() == [2, 1]
        assert out.rewards.tolist() == [2.0, 1.0]


def test_noiseless_rewards_equal_next_state():
    inst = core.gen_two_state_instance(6, 3, budget=2)
    rng = np.random.default_rng(1)
    s = np.zeros(6, dtype=int)
    for _ in range(30):
        out = env.step(inst, s, [1, 1, 0, 0, 0, 0], rng)
        assert np.array_equal(out.rewards, out.next_state.astype(float))
        s = out.next_state


def test_budget_violation_raises():
    inst = core.gen_two_state_instance(3, 0, budget=1)
    with pytest.raises(BudgetError):
        env.step(inst, [0, 0, 0], [1, 1, 0], np.random.default_rng(0))
    with pytest.raises(BudgetError):
        env.step(inst, [0, 0, 0], [0, 0, 0], np.random.default_rng(0))

    class Cheater:
        def act(self, obs, rng):
            return np.ones(3, dtype=int)

        def update(self, *a):
            pass
    with pytest.raises(BudgetError):
        rollout(inst, Cheater(), rng=np.random.default_rng(0))


def test_transition_frequencies():
    inst = core.gen_multi_state_instance(1, 4, 5, budget=1)
    sim = env.Simulator(inst)
    n = 100_000
    rng = np.random.default_rng(2)
    for a, s in ((1, 2), (0, 0)):
        nxt = sim.transition(np.full((n, 1), s), np.full((n, 1), a), rng.random((n, 1)))[:, 0]
        freq = np.bincount(nxt, minlength=4) / n
        p = inst.P[0, a, s]
        assert np.all(np.abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / n) + 1e-12)
        # chi-square at alpha = 0.001 with 3 dof: 16.27
        chi2 = np.sum((freq * n - p * n) ** 2 / (p * n))
        assert chi2 < 16.27


def test_gaussian_reward_means():
    inst = core.gen_two_state_instance(1, 4, noise=core.NoiseModel("gaussian", 1.0))
    sim = env.Simulator(inst)
    rng = np.random.default_rng(3)
    n = 50_000
    states = rng.integers(0, 2, size=(n, 1))
    r = sim.emit(states, rng.standard_normal((n, 1)))[:, 0]
    for s in (0, 1):
        sel = r[states[:, 0] == s]
        assert abs(sel.mean() - s) <= 4.0 / np.sqrt(sel.size)


def test_horizon_one():
    inst = core.gen_two_state_instance(3, 0, budget=1, horizon=1)
    tr = rollout(inst, RandomPolicy.for_instance(inst), rng=np.random.default_rng(0))
    assert tr.actions.shape == (1, 3) and tr.states.shape == (2, 3) and tr.rewards.shape == (2, 3)


def test_rollout_deterministic():
    inst = core.gen_two_state_instance(5, 1, budget=2, horizon=40, noise=core.NoiseModel("gaussian", 1.0))
    a = rollout(inst, RandomPolicy.for_instance(inst), rng=np.random.default_rng(9))
    b = rollout(inst, RandomPolicy.for_instance(inst), rng=np.random.default_rng(9))
    assert a.to_csv() == b.to_csv()
    assert np.array_equal(a.rewards, b.rewards)


def test_trajectory_invariants_and_csv():
    inst = core.gen_two_state_instance(4, 2, budget=2, horizon=7)
    tr = rollout(inst, OracleGreedy.for_instance(inst), rng=np.random.default_rng(0))
    assert np.all(tr.actions.sum(axis=1) == 2)
    lines = tr.to_csv().splitlines()
    assert lines[0] == "t,agent,state,action,reward"
    assert len(lines) == 1 + 8 * 4
    assert lines[-1].split(",")[3] == ""


def test_oracle_greedy_matches_exact_value():
    inst = core.gen_two_state_instance(3, 12, budget=1, horizon=5)
    R = 10_000
    pol = OracleGreedy.for_instance(inst, reps=R)
    bt = simulate(inst, pol, [np.random.default_rng([4, r]) for r in range(R)],
                  [np.random.default_rng([5, r]) for r in range(R)])
    totals = bt.rewards.sum(axis=(1, 2))
    exact = exact_policy_value(inst, actor_policy(OracleGreedy.for_instance(inst), 3), (0, 0, 0))
    se = totals.std(ddof=1) / np.sqrt(R)
    assert abs(totals.mean() - exact) <= 3 * se


@pytest.mark.parametrize("name", list(policy_factories()))
@pytest.mark.parametrize("S,noisy", [(2, True), (4, True), (3, False)])
def test_simulate_matches_rollout(name, S, noisy):
    noise = core.NoiseModel("gaussian", 0.5) if noisy else None
    inst = core.gen_multi_state_instance(5, S, 21, budget=2, horizon=30, threshold=0.1, noise=noise)
    make = policy_factories()[name]
    R = 4
    bt = simulate(inst, make(inst, reps=R), [np.random.default_rng([1, r]) for r in range(R)],
                  [np.random.default_rng([2, r]) for r in range(R)])
    for r in range(R):
        tr = rollout(inst, make(inst), rng=np.random.default_rng([1, r]),
                     policy_rng=np.random.default_rng([2, r]))
        assert np.array_equal(tr.states, bt[r].states)
        assert np.array_equal(tr.actions, bt[r].actions)
        assert np.array_equal(tr.rewards, bt[r].rewards)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), M=st.integers(1, 6), data=st.data())
def test_budget_equality_every_step(seed, M, data):
    B = data.draw(st.integers(1, M))
    name = data.draw(st.sampled_from(sorted(policy_factories())))
    inst = core.gen_two_state_instance(M, seed, budget=B, horizon=25, threshold=0.0)
    tr = rollout(inst, policy_factories()[name](inst), rng=np.random.default_rng(seed))
    assert np.all(tr.actions.sum(axis=1) == B)
    assert set(np.unique(tr.actions)) <= {0, 1}


def test_observation_sequence_contract():
    inst = core.gen_two_state_instance(3, 0, budget=1)
    pol = RandomPolicy.for_instance(inst)
    o0 = Observation(0, np.zeros(3, dtype=int), np.zeros(3))
    o1 = Observation(1, np.zeros(3, dtype=int), np.zeros(3), np.array([1, 0, 0]))
    pol.update(o0, np.array([1, 0, 0]), o1)
    from rbthresh.policies import PolicyContractError
    with pytest.raises(PolicyContractError):
        pol.update(o0, np.array([1, 0, 0]), o1)
