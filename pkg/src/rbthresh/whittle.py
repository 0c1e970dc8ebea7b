"""Discounted Whittle indices and the index policy built on them.

For a subsidy-free penalty ``lam`` on the active action,

    Q(s, a) = R(s) - lam * [a = 1] + beta * sum_s' P_a(s, s') V(s'),
    V(s)    = max_a Q(s, a),

and the index of state ``s`` is the ``lam`` at which both actions tie.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .core import AgentModel, Instance
from .policies import BatchPolicy, indicator, top_b

LAMBDA_LO = -10.0


class ConvergenceError(RuntimeError):
    pass


class IndexOutOfRangeError(ValueError):
    """The tie point is not bracketed by the search interval."""


def _batched_q(P: np.ndarray, R: np.ndarray, lam: np.ndarray, beta: float, tol: float,
               max_iter: int) -> np.ndarray:
    """Value iteration for ``K`` independent problems.

    ``P`` is (K, 2, S, S), ``R`` (K, S), ``lam`` (K,).  Returns Q of shape
    (K, S, 2) evaluated at the converged V.
    """
    K, _, S, _ = P.shape
    V = np.zeros((K, S))
    base = np.stack([R, R - lam[:, None]], axis=2)          # (K, S, 2)
    for _ in range(max_iter):
        Q = base + beta * np.einsum("kast,kt->ksa", P, V)
        V_new = Q.max(axis=2)
        res = np.max(np.abs(V_new - V)) if K else 0.0
        V = V_new
        if res <= tol:
            return base + beta * np.einsum("kast,kt->ksa", P, V)
    raise ConvergenceError(f"value iteration did not reach {tol} in {max_iter} sweeps")


def q_values(agent: AgentModel, lam: float, beta: float = 0.9, tol: float = 1e-10,
             max_iter: int = 1_000_000) -> np.ndarray:
    """Q table of shape (S, 2) for one agent at penalty ``lam``."""
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    return _batched_q(agent.transitions[None], agent.rewards[None], np.array([float(lam)]),
                      beta, tol, max_iter)[0]


def advantage(agent: AgentModel, s: int, lams, beta: float = 0.9, tol: float = 1e-10) -> np.ndarray:
    """``g(lam) = Q(s,1) - Q(s,0)`` for each penalty in ``lams``."""
    lams = np.atleast_1d(np.asarray(lams, dtype=float))
    K = lams.size
    P = np.broadcast_to(agent.transitions, (K,) + agent.transitions.shape)
    R = np.broadcast_to(agent.rewards, (K, agent.n_states))
    Q = _batched_q(P, R, lams, beta, tol, 1_000_000)
    return Q[:, s, 1] - Q[:, s, 0]


def upper_bracket(rewards: np.ndarray, beta: float) -> float:
    """``max R / (1 - beta) + 1``, widened to the reward span when rewards are negative.

    Any index is at most ``beta * (max R - min R) / (1 - beta)``.
    """
    hi, lo = float(np.max(rewards)), float(np.min(rewards))
    return max(hi, hi - lo) / (1.0 - beta) + 1.0


def _bisect(P, R, states, beta, tol, vi_tol, hi):
    K = len(states)
    rows = np.arange(K)
    lo = np.full(K, LAMBDA_LO)
    hi = np.asarray(hi, dtype=float).copy()

    def g(lam):
        Q = _batched_q(P, R, lam, beta, vi_tol, 1_000_000)
        return Q[rows, states, 1] - Q[rows, states, 0]

    g_lo, g_hi = g(lo), g(hi)
    bad = (g_lo < 0) | (g_hi > 0)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise IndexOutOfRangeError(
            f"no sign change on [{lo[k]}, {hi[k]}] (g={g_lo[k]:.3g}, {g_hi[k]:.3g}) for problem {k}")
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        pos = g(mid) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    return 0.5 * (lo + hi)


def whittle_index(agent: AgentModel, s: int, beta: float = 0.9, tol: float = 1e-6,
                  vi_tol: float = 1e-10) -> float:
    """Bisection for the tie penalty of state ``s`` on ``[-10, upper_bracket]``."""
    if not 0 <= s < agent.n_states:
        raise IndexError(f"state {s} out of range")
    hi = upper_bracket(agent.rewards, beta)
    return float(_bisect(agent.transitions[None], agent.rewards[None], np.array([s]),
                         beta, tol, vi_tol, [hi])[0])


@dataclass(frozen=True)
class IndexTable:
    values: np.ndarray          # (M, S)
    beta: float
    tol: float
    vi_tol: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["agent", "state", "lambda"])
        for m, row in enumerate(self.values):
            for s, v in enumerate(row):
                w.writerow([m, s, repr(float(v))])
        return buf.getvalue()


def index_table(instance: Instance, beta: float = 0.9, tol: float = 1e-6, vi_tol: float = 1e-10) -> IndexTable:
    """Indices of every (agent, state) pair, bisected together."""
    M, S = instance.n_agents, instance.n_states
    m_idx = np.repeat(np.arange(M), S)
    s_idx = np.tile(np.arange(S), M)
    P = np.asarray(instance.P)[m_idx]
    R = np.asarray(instance.R)[m_idx]
    hi = [upper_bracket(instance.R[m], beta) for m in m_idx]
    lam = _bisect(P, R, s_idx, beta, tol, vi_tol, hi)
    vals = lam.reshape(M, S)
    vals.setflags(write=False)
    return IndexTable(vals, beta, tol, vi_tol)


class OracleWhittle(BatchPolicy):
    """Acts on the ``B`` agents whose current states carry the largest index."""

    name = "oracle-whittle"

    def __init__(self, instance: Instance, table: IndexTable | None = None, beta: float = 0.9, reps: int = 1):
        super().__init__(instance.n_agents, instance.budget, reps)
        self.table = table if table is not None else index_table(instance, beta)

    @classmethod
    def for_instance(cls, instance: Instance, reps: int = 1, table: IndexTable | None = None) -> "OracleWhittle":
        return cls(instance, table, reps=reps)

    def choose(self, t, state, draws):
        return indicator(top_b(self.table.values[self._mm, state], self.B), self.M)
