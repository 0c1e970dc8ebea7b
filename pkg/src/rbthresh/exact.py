"""Exact dynamic programming on the joint MDP for small instances.

Joint states are stored as tensors with one axis per agent, so the joint
transition is applied axis by axis instead of forming ``S^M x S^M``
matrices.  Flat joint-state indices follow ``itertools.product`` order
(agent 0 most significant).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .core import AgentModel, Instance, derive_seed, gen_two_state_instance
from .env import Observation
from .policies import OracleGreedy

DEFAULT_SIZE_BUDGET = 1_000_000


class SizeBudgetError(ValueError):
    pass


class JointMdp:
    def __init__(self, instance: Instance, size_budget: int = DEFAULT_SIZE_BUDGET):
        M, S, B = instance.n_agents, instance.n_states, instance.budget
        n_actions = sum(1 for _ in itertools.combinations(range(M), B))
        if S ** M * n_actions > size_budget:
            raise SizeBudgetError(f"{S}^{M} states x {n_actions} actions exceeds budget {size_budget}")
        self.instance = instance
        self.M, self.S, self.B = M, S, B
        self.shape = (S,) * M
        self.n_states = S ** M
        self.actions = [a for a in itertools.product((0, 1), repeat=M) if sum(a) == B]
        self.action_index = {a: i for i, a in enumerate(self.actions)}
        self.P = np.asarray(instance.P)
        R = np.zeros(self.shape)
        for m in range(M):
            sh = [1] * M
            sh[m] = S
            R = R + np.asarray(instance.R[m]).reshape(sh)
        self.reward = R                                   # joint reward tensor

    def states(self):
        return itertools.product(range(self.S), repeat=self.M)

    def flat(self, state) -> int:
        return int(np.ravel_multi_index(tuple(state), self.shape))

    def expect(self, V: np.ndarray, action) -> np.ndarray:
        """``E[V(s') | s, a]`` as a tensor over ``s``."""
        for m, a in enumerate(action):
            V = np.moveaxis(np.tensordot(self.P[m, a], V, axes=([1], [m])), 0, m)
        return V

    def push(self, d: np.ndarray, action) -> np.ndarray:
        """Distribution after one step from ``d`` under a fixed action."""
        for m, a in enumerate(action):
            d = np.moveaxis(np.tensordot(d, self.P[m, a], axes=([m], [0])), -1, m)
        return d


@dataclass(frozen=True)
class ValueTable:
    values: np.ndarray      # (T+1, S^M), V_h for h = 0..T
    policy: np.ndarray      # (T, S^M), index into mdp.actions chosen at h
    q: np.ndarray           # (T, S^M, |F|)
    mdp: JointMdp

    def value(self, h: int, state) -> float:
        return float(self.values[h, self.mdp.flat(state)])

    def q_value(self, h: int, state, action) -> float:
        return float(self.q[h, self.mdp.flat(state), self.mdp.action_index[tuple(action)]])

    def action(self, h: int, state) -> tuple:
        return self.mdp.actions[self.policy[h, self.mdp.flat(state)]]


def backward_induction(instance: Instance, size_budget: int = DEFAULT_SIZE_BUDGET) -> ValueTable:
    """Optimal values with ``V_T = R`` and ``T`` decisions before it.

    Ties go to the lexicographically smallest action vector.
    """
    mdp = JointMdp(instance, size_budget)
    T = instance.horizon
    values = np.empty((T + 1, mdp.n_states))
    policy = np.empty((T, mdp.n_states), dtype=np.int64)
    q = np.empty((T, mdp.n_states, len(mdp.actions)))
    V = mdp.reward
    values[T] = V.ravel()
    for h in range(T - 1, -1, -1):
        Qh = np.stack([(mdp.reward + mdp.expect(V, a)).ravel() for a in mdp.actions], axis=1)
        best = np.argmax(Qh, axis=1)
        q[h], policy[h] = Qh, best
        values[h] = Qh[np.arange(mdp.n_states), best]
        V = values[h].reshape(mdp.shape)
    return ValueTable(values, policy, q, mdp)


JointPolicy = Callable[[int, tuple], tuple]


def actor_policy(actor, n_agents: int) -> JointPolicy:
    """Wrap a deterministic policy object (``act(obs, rng)``) as ``(t, state) -> action``."""
    zeros = np.zeros(n_agents)

    def pol(t, state):
        obs = Observation(t, np.asarray(state, dtype=np.int64), zeros, None)
        return tuple(int(x) for x in actor.act(obs, None))
    return pol


def table_policy(table: ValueTable) -> JointPolicy:
    return lambda t, state: table.action(t, state)


def exact_policy_value(instance: Instance, policy: JointPolicy, s0,
                       size_budget: int = DEFAULT_SIZE_BUDGET) -> float:
    """Expected total reward over t=0..T by pushing the joint distribution forward."""
    mdp = JointMdp(instance, size_budget)
    d = np.zeros(mdp.shape)
    d[tuple(s0)] = 1.0
    total = float(np.sum(d * mdp.reward))
    all_states = list(mdp.states())
    for t in range(instance.horizon):
        groups: dict = {}
        for st in all_states:
            if d[st] != 0.0:
                a = tuple(int(x) for x in policy(t, st))
                if a not in mdp.action_index:
                    raise ValueError(f"policy returned infeasible action {a} at t={t}, state {st}")
                groups.setdefault(a, []).append(st)
        nxt = np.zeros(mdp.shape)
        for a, sts in groups.items():
            part = np.zeros(mdp.shape)
            for st in sts:
                part[st] = d[st]
            nxt += mdp.push(part, a)
        d = nxt
        total += float(np.sum(d * mdp.reward))
    return total


def single_chain_value(agent: AgentModel, action_seq, s0: int) -> float:
    """Expected reward of one agent following a fixed open-loop action sequence."""
    d = np.zeros(agent.n_states)
    d[s0] = 1.0
    total = float(d @ agent.rewards)
    for a in action_seq:
        d = d @ agent.transitions[a]
        total += float(d @ agent.rewards)
    return total


# ---------------------------------------------------------------------------
# verifiers
# ---------------------------------------------------------------------------

def check_greedy_optimality(instance: Instance, tol: float = 1e-9) -> dict:
    """Compare the greedy policy with the optimum from every initial state."""
    table = backward_induction(instance)
    greedy = actor_policy(OracleGreedy(instance), instance.n_agents)
    rows, worst = [], 0.0
    for st in table.mdp.states():
        opt = table.value(0, st)
        val = exact_policy_value(instance, greedy, st)
        worst = max(worst, abs(opt - val))
        if abs(opt - val) > tol:
            rows.append({"state": list(st), "optimal": opt, "greedy": val})
    return {"max_abs_diff": worst, "violations": rows}


def verify_theorem1(trials: int = 200, M_range=(2, 3), B_range=None, T_range=(3, 6), seed: int = 0,
                    tol: float = 1e-9) -> dict:
    """Greedy versus optimal on random homogeneous two-state instances.

    ``M``, ``T`` are drawn uniformly from the inclusive ranges and ``B`` from
    ``B_range`` (default ``1..M-1``).
    """
    rng = np.random.default_rng(derive_seed(seed, "theorem1", "shapes"))
    report = {"trials": trials, "tol": tol, "violations": [], "max_abs_diff": 0.0, "checked_states": 0}
    for k in range(trials):
        M = int(rng.integers(M_range[0], M_range[1] + 1))
        lo, hi = B_range if B_range is not None else (1, M - 1)
        B = int(rng.integers(lo, hi + 1))
        T = int(rng.integers(T_range[0], T_range[1] + 1))
        inst = gen_two_state_instance(M, derive_seed(seed, "theorem1", k), homogeneous=True,
                                      budget=B, horizon=T)
        res = check_greedy_optimality(inst, tol)
        report["checked_states"] += 2 ** M
        report["max_abs_diff"] = max(report["max_abs_diff"], res["max_abs_diff"])
        for v in res["violations"]:
            report["violations"].append({"trial": k, "M": M, "B": B, "T": T, **v})
    report["passed"] = not report["violations"]
    return report


# -- heterogeneous counterexample ------------------------------------------

def counterexample_two_type(horizon: int = 20) -> Instance:
    """Two agents of each type, budget one, ``R = (0, 1)``."""
    type1 = AgentModel(np.array([[[1, 0], [2 / 3, 1 / 3]],
                                 [[1 / 3, 2 / 3], [1 / 2, 1 / 2]]]), np.array([0.0, 1.0]))
    type2 = AgentModel(np.array([[[1, 0], [1, 0]],
                                 [[1 / 4, 3 / 4], [1 / 4, 3 / 4]]]), np.array([0.0, 1.0]))
    return Instance((type1, type1, type2, type2), budget=1, horizon=horizon)


def always_type2(t, state):
    return (0, 0, 1, 0)


def alternate_type1(t, state):
    return (1, 0, 0, 0) if t % 2 == 0 else (0, 1, 0, 0)


def two_type_incremental() -> dict:
    """Incremental rewards of both types, exact."""
    F = Fraction
    t1 = {"P1": [[F(1, 3), F(2, 3)], [F(1, 2), F(1, 2)]], "P0": [[F(1), F(0)], [F(2, 3), F(1, 3)]]}
    t2 = {"P1": [[F(1, 4), F(3, 4)], [F(1, 4), F(3, 4)]], "P0": [[F(1), F(0)], [F(1), F(0)]]}
    out = {}
    for name, t in (("type1", t1), ("type2", t2)):
        out[name] = [t["P1"][s][1] - t["P0"][s][1] for s in (0, 1)]
    return out


def verify_counterexample_two_type(horizon: int = 20, reps: int = 300, seed: int = 0,
                                   reported=(15.02, 16.78)) -> dict:
    inst = counterexample_two_type(horizon)
    s0 = (0, 0, 0, 0)
    exact = {"always-type2": exact_policy_value(inst, always_type2, s0),
             "alternate-type1": exact_policy_value(inst, alternate_type1, s0)}
    from .env import Simulator
    sim = Simulator(inst)
    mc = {}
    for name, pol in (("always-type2", always_type2), ("alternate-type1", alternate_type1)):
        rng = np.random.default_rng(derive_seed(seed, "two-type", name))
        totals = np.empty(reps)
        for r in range(reps):
            U, Z = sim.draw(rng, horizon)
            s = np.zeros(4, dtype=np.int64)
            tot = float(sim.emit(s, None if Z is None else Z[0]).sum())
            for t in range(horizon):
                s = sim.transition(s, np.array(pol(t, tuple(s))), U[t])
                tot += float(sim.emit(s, None if Z is None else Z[t + 1]).sum())
            totals[r] = tot
        mc[name] = {"mean": float(totals.mean()), "se": float(totals.std(ddof=1) / np.sqrt(reps))}
    greedy = check_greedy_optimality(inst)
    return {"horizon": horizon, "reps": reps, "exact": exact, "monte_carlo": mc,
            "reported": dict(zip(exact, reported)),
            "incremental": {k: [str(x) for x in v] for k, v in two_type_incremental().items()},
            "greedy_violations_found": len(greedy["violations"]),
            "ordering_ok": exact["alternate-type1"] > exact["always-type2"]}


# -- three-state homogeneous counterexample ----------------------------------

_D_P1 = [[1, 0, 0], [0, Fraction(1, 2), Fraction(1, 2)], [Fraction(5, 7), Fraction(1, 7), Fraction(1, 7)]]
_D_P0 = [[1, 0, 0], [0, Fraction(3, 4), Fraction(1, 4)], [Fraction(23, 28), Fraction(5, 28), 0]]
_D_R = [0, 1, 2]


def three_state_agent() -> AgentModel:
    P = np.array([[[float(x) for x in row] for row in mat] for mat in (_D_P0, _D_P1)])
    return AgentModel(P, np.array(_D_R, dtype=float))


def counterexample_three_state(horizon: int = 3) -> Instance:
    a = three_state_agent()
    return Instance((a, a), budget=1, horizon=horizon)


def three_state_incremental() -> list:
    return [sum((Fraction(p1) - Fraction(p0)) * r for p1, p0, r in zip(_D_P1[s], _D_P0[s], _D_R))
            for s in range(3)]


def displayed_branch_values() -> dict:
    """The two closed-form branch values exactly as printed alongside the example."""
    F = Fraction
    act1 = 3 + F(5, 56) * F(47 + 3 * 28, 28) + F(5, 56) * F(19, 4) + F(23, 28) * F(5, 2)
    act2 = (3 + F(1, 28) * (F(17, 28) + 4) + F(1, 7) * (3 + F(47, 28)) + F(15, 28) * F(5, 2)
            + F(5, 28) * (F(3, 7) + 2) + F(3, 28) * (F(11, 4) + 2))
    return {"act-on-state-1": act1, "act-on-state-2": act2}


def verify_counterexample_three_state(tol: float = 1e-9) -> dict:
    """Branch values at joint state (1, 2) and their ordering.

    The printed expressions carry three reward epochs (two decisions), so
    they are compared with backward induction at horizon 2; the ordering is
    reported for both horizon 2 and horizon 3.
    """
    state = (1, 2)
    shown = displayed_branch_values()
    out = {"state": list(state), "incremental": [str(x) for x in three_state_incremental()],
           "displayed": {k: float(v) for k, v in shown.items()}, "horizons": {}}
    for T in (2, 3):
        table = backward_induction(counterexample_three_state(T))
        act1, act2 = table.q_value(0, state, (1, 0)), table.q_value(0, state, (0, 1))
        out["horizons"][T] = {"act-on-state-1": act1, "act-on-state-2": act2,
                              "ordering_ok": act2 > act1, "optimal_action": list(table.action(0, state))}
    h2 = out["horizons"][2]
    out["matches_displayed"] = {k: abs(h2[k] - float(shown[k])) <= tol for k in shown}
    I = three_state_incremental()
    out["incremental_ok"] = I[1] == I[2] == Fraction(1, 4)
    out["passed"] = (out["incremental_ok"] and all(h["ordering_ok"] for h in out["horizons"].values())
                     and all(out["matches_displayed"].values()))
    return out
