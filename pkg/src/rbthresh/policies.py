"""Allocation policies.

Every policy exposes ``act(obs, rng) -> action`` (read-only apart from the
rng) and ``update(obs, action, next_obs)`` which consumes the realised
transition exactly once.

Internally each policy is written for ``R`` independent repetitions run in
lockstep: ``choose`` maps joint states of shape (R, M) plus a block of
pre-drawn uniforms to actions, and ``observe`` folds in one transition per
repetition.  ``act``/``update`` are the single-run view (R = 1).  A policy
consumes exactly ``n_uniforms`` uniforms per decision, drawn as one
``rng.random(n_uniforms)`` call, so a whole run's draws can also be taken
as a single block with identical results.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import Instance, good_set
from .env import Observation


class PolicyContractError(RuntimeError):
    """Transition fed out of order or twice."""


def top_b(values: np.ndarray, B: int) -> np.ndarray:
    """Indices of the ``B`` largest values along the last axis, ties to the lowest index."""
    return np.argsort(-np.asarray(values, dtype=float), axis=-1, kind="stable")[..., :B]


def indicator(idx, M: int) -> np.ndarray:
    """0/1 vector(s) of length ``M`` with ones at ``idx`` (last axis)."""
    idx = np.asarray(idx)
    a = np.zeros(idx.shape[:-1] + (M,), dtype=np.int8)
    np.put_along_axis(a, idx, 1, axis=-1)
    return a


def subset_from_keys(keys: np.ndarray, B: int) -> np.ndarray:
    """The ``B`` agents with the smallest keys; uniform when keys are i.i.d."""
    return indicator(np.argsort(keys, axis=-1, kind="stable")[..., :B], keys.shape[-1])


def uniform_subset(M: int, B: int, rng: np.random.Generator) -> np.ndarray:
    return subset_from_keys(rng.random(M), B)


class BatchPolicy:
    """Shared plumbing: lockstep core plus the single-run interface."""

    name = "policy"
    n_uniforms = 0

    def __init__(self, n_agents: int, budget: int, reps: int = 1):
        if not 1 <= budget <= n_agents:
            raise ValueError("need 1 <= B <= M")
        self.M, self.B, self.R = n_agents, budget, reps
        self._rr = np.arange(reps)[:, None]
        self._mm = np.arange(n_agents)[None, :]
        self._next_t = 0

    # lockstep interface -------------------------------------------------
    def choose(self, t: int, state: np.ndarray, draws: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def observe(self, t: int, state, action, next_state, rewards, next_rewards) -> None:
        pass

    # single-run interface -----------------------------------------------
    def act(self, obs: Observation, rng: np.random.Generator | None = None) -> np.ndarray:
        if self.R != 1:
            raise PolicyContractError("act() is the single-run view; this policy holds several repetitions")
        draws = rng.random((1, self.n_uniforms)) if self.n_uniforms else np.empty((1, 0))
        return self.choose(obs.t, np.asarray(obs.state)[None], draws)[0]

    def update(self, obs: Observation, action, next_obs: Observation) -> None:
        if obs.t != self._next_t or next_obs.t != obs.t + 1:
            raise PolicyContractError(
                f"expected transition {self._next_t}->{self._next_t + 1}, got {obs.t}->{next_obs.t}")
        self.observe(obs.t, np.asarray(obs.state)[None], np.asarray(action)[None],
                     np.asarray(next_obs.state)[None], np.asarray(obs.last_rewards)[None],
                     np.asarray(next_obs.last_rewards)[None])
        self._next_t += 1

    def advance(self, t: int, *args) -> None:
        """Lockstep counterpart of :meth:`update`."""
        if t != self._next_t:
            raise PolicyContractError(f"expected transition {self._next_t}, got {t}")
        self.observe(t, *args)
        self._next_t += 1

    @property
    def t(self) -> int:
        return self._next_t


class RandomPolicy(BatchPolicy):
    """``B`` agents uniformly without replacement (``M`` uniforms per step)."""

    name = "random"

    def __init__(self, n_agents: int, budget: int, reps: int = 1):
        super().__init__(n_agents, budget, reps)
        self.n_uniforms = n_agents

    @classmethod
    def for_instance(cls, instance: Instance, reps: int = 1) -> "RandomPolicy":
        return cls(instance.n_agents, instance.budget, reps)

    def choose(self, t, state, draws):
        return subset_from_keys(draws, self.B)


class OracleGreedy(BatchPolicy):
    """Top-``B`` agents by true incremental reward in their current state."""

    name = "oracle-greedy"

    def __init__(self, instance: Instance, reps: int = 1):
        super().__init__(instance.n_agents, instance.budget, reps)
        self.I = np.asarray(instance.incremental)

    @classmethod
    def for_instance(cls, instance: Instance, reps: int = 1) -> "OracleGreedy":
        return cls(instance, reps)

    def choose(self, t, state, draws):
        return indicator(top_b(self.I[self._mm, state], self.B), self.M)


class ReferencePolicy(BatchPolicy):
    """Uniform over the currently good agents; top-up by true ``I`` if too few.

    Draws ``M`` uniform keys per step whether or not they are needed.
    """

    name = "reference"

    def __init__(self, instance: Instance, threshold: float | None = None, reps: int = 1):
        super().__init__(instance.n_agents, instance.budget, reps)
        self.I = np.asarray(instance.incremental)
        self.gamma = instance.threshold if threshold is None else float(threshold)
        self.n_uniforms = instance.n_agents

    @classmethod
    def for_instance(cls, instance: Instance, reps: int = 1) -> "ReferencePolicy":
        return cls(instance, reps=reps)

    def choose(self, t, state, draws):
        inc = self.I[self._mm, state]
        good = inc >= self.gamma
        enough = good.sum(axis=1) >= self.B
        by_key = np.argsort(np.where(good, draws, 2.0), axis=1, kind="stable")[:, :self.B]
        by_inc = top_b(inc, self.B)
        return indicator(np.where(enough[:, None], by_key, by_inc), self.M)


# ---------------------------------------------------------------------------
# epsilon-greedy thresholding
# ---------------------------------------------------------------------------

def budget_scaling(M: int, B: int) -> float:
    """``D = max(8M/B, 8M/(M-B), 2)``; the middle term is dropped when B = M."""
    terms = [8.0 * M / B, 2.0]
    if B < M:
        terms.append(8.0 * M / (M - B))
    return max(terms)


def explore_fn(N, T: int):
    """``f(N, T) = ln ln(2N + 0.72 ln(10.4 T))``, clamped below at 0."""
    x = 2.0 * np.asarray(N, dtype=float) + 0.72 * math.log(10.4 * T)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
        f = np.where(y > 1.0, np.log(np.maximum(y, 1.0)), 0.0)
    return f if f.ndim else float(f)


def bonus(N, T: int):
    """``sqrt(f(N, T) / (N + 2))``, with ``inf`` at ``N = 0``."""
    N = np.asarray(N, dtype=float)
    out = np.where(N >= 1, np.sqrt(explore_fn(N, T) / (N + 2.0)), np.inf)
    return out if out.ndim else float(out)


def ucb_value(I_hat, N1, N0, T: int):
    """Optimistic incremental reward; ``inf`` until both actions were tried."""
    out = np.asarray(I_hat, dtype=float) + bonus(N1, T) + bonus(N0, T)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class EpsGtConfig:
    threshold: float
    horizon: int
    D: float = 2.0
    p: float = 1.0
    eta: float = 1.0

    def __post_init__(self):
        if not (self.D > 0 and self.p > 0 and self.eta > 0):
            raise ValueError("D, p and eta must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @classmethod
    def for_instance(cls, instance: Instance, *, threshold: float | None = None, D: float | None = None,
                     p: float = 1.0, eta: float | None = 1.0) -> "EpsGtConfig":
        """Budget-scaled ``D`` unless given; ``eta=None`` uses the instance's true margin."""
        gamma = instance.threshold if threshold is None else threshold
        if D is None:
            D = budget_scaling(instance.n_agents, instance.budget)
        if eta is None:
            eta = good_set(instance.with_threshold(gamma)).delta
            if not math.isfinite(eta) or eta <= 0:
                raise ValueError(f"instance margin {eta} cannot serve as eta")
        return cls(float(gamma), instance.horizon, float(D), float(p), float(eta))


def exploration_rate(counts, config: EpsGtConfig):
    """``min(1, min_m D / ((N_m + 1)^p * min(eta^2, 1/2)))`` over occupied-state counts.

    ``counts`` has the agents on its last axis; leading axes broadcast.
    """
    n_max = np.max(np.asarray(counts, dtype=float), axis=-1)
    eps = np.minimum(1.0, config.D / ((n_max + 1.0) ** config.p * min(config.eta ** 2, 0.5)))
    return eps if eps.ndim else float(eps)


class EpsGreedyThresholding(BatchPolicy):
    """The epsilon-greedy thresholding learner (``M + 1`` uniforms per step).

    Estimates ``I(s)`` per agent from its own pulls, acts on agents whose
    estimate clears ``gamma``, tops up by UCB, and explores uniformly with a
    rate tied to how often the occupied states have been seen.  The first
    uniform decides exploration, the other ``M`` are subset keys.
    """

    name = "eps-gt"

    def __init__(self, n_agents: int, n_states: int, budget: int, config: EpsGtConfig, reps: int = 1):
        super().__init__(n_agents, budget, reps)
        self.S, self.cfg = n_states, config
        self.n_uniforms = n_agents + 1
        shape = (reps, n_agents, n_states)
        self.N = np.zeros(shape, dtype=np.int64)
        self.Na = np.zeros(shape + (2,), dtype=np.int64)
        self.phi = np.zeros(shape + (2,))
        self.I_hat = np.zeros(shape)
        self.ucb = np.full(shape, np.inf)
        self.defined = np.zeros(shape, dtype=bool)
        self._bonus = bonus(np.arange(config.horizon + 1), config.horizon)

    @classmethod
    def for_instance(cls, instance: Instance, reps: int = 1, **kw) -> "EpsGreedyThresholding":
        return cls(instance.n_agents, instance.n_states, instance.budget,
                   EpsGtConfig.for_instance(instance, **kw), reps)

    def epsilon(self, state) -> np.ndarray:
        state = np.atleast_2d(state)
        return exploration_rate(self.N[self._rr, self._mm, state], self.cfg)

    def greedy_action(self, state) -> np.ndarray:
        single = np.ndim(state) == 1
        state = np.atleast_2d(state)
        rr, mm, B = self._rr, self._mm, self.B
        ih = self.I_hat[rr, mm, state]
        ucb = self.ucb[rr, mm, state]
        dfn = self.defined[rr, mm, state]
        in_g = ih >= self.cfg.threshold
        full = (in_g.sum(axis=1) >= B)[:, None]
        # too few candidates: all of them, then the rest by UCB.
        # enough candidates: estimated-good by I_hat, then unestimated by UCB.
        tier = np.where(full, np.where(in_g, np.where(dfn, 0, 1), 2), np.where(in_g, 0, 1))
        val = np.where(full, np.where(in_g & dfn, -ih, -ucb), np.where(in_g, 0.0, -ucb))
        order = np.lexsort((np.broadcast_to(mm, tier.shape), val, tier), axis=-1)[:, :B]
        a = indicator(order, self.M)
        return a[0] if single else a

    def choose(self, t, state, draws):
        explore = draws[:, 0] < self.epsilon(state)
        rand = subset_from_keys(draws[:, 1:], self.B)
        return np.where(explore[:, None], rand, self.greedy_action(state))

    def observe(self, t, state, action, next_state, rewards, next_rewards):
        rr, mm = self._rr, self._mm
        a = np.asarray(action, dtype=np.int64)
        self.N[rr, mm, state] += 1
        self.Na[rr, mm, state, a] += 1
        self.phi[rr, mm, state, a] += next_rewards
        n1, n0 = self.Na[rr, mm, state, 1], self.Na[rr, mm, state, 0]
        both = (n1 >= 1) & (n0 >= 1)
        est = self.phi[rr, mm, state, 1] / np.maximum(n1, 1) - self.phi[rr, mm, state, 0] / np.maximum(n0, 1)
        ih = np.where(both, est, 0.0)
        if max(n1.max(), n0.max()) >= self._bonus.size:
            self._bonus = bonus(np.arange(2 * self._bonus.size), self.cfg.horizon)
        self.I_hat[rr, mm, state] = ih
        self.ucb[rr, mm, state] = ih + self._bonus[n1] + self._bonus[n0]
        self.defined[rr, mm, state] = both

    def snapshot(self, rep: int = 0) -> dict:
        return {
            "t": self._next_t,
            "config": asdict(self.cfg),
            "N": self.N[rep].tolist(),
            "Na": self.Na[rep].tolist(),
            "phi": self.phi[rep].tolist(),
            "I_hat": self.I_hat[rep].tolist(),
            "ucb": [[None if math.isinf(u) else u for u in row] for row in self.ucb[rep].tolist()],
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.snapshot(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Whittle-index Q-learning
# ---------------------------------------------------------------------------

class WIQL(BatchPolicy):
    """Tabular Q-learning per agent; acts on the largest ``Q(s,1) - Q(s,0)``.

    Explores uniformly with probability ``M / (M + t)`` (``M + 1`` uniforms
    per step, as for the thresholding learner).  The update target uses the
    reward of the state the action was taken in, so a fixed point of the
    update is the zero-subsidy discounted dynamic program.
    """

    name = "wiql"

    def __init__(self, n_agents: int, n_states: int, budget: int, discount: float = 0.9, reps: int = 1):
        if not 0 < discount < 1:
            raise ValueError("discount must lie in (0, 1)")
        super().__init__(n_agents, budget, reps)
        self.S, self.beta = n_states, discount
        self.n_uniforms = n_agents + 1
        self.Q = np.zeros((reps, n_agents, n_states, 2))
        self.n = np.zeros((reps, n_agents, n_states, 2), dtype=np.int64)

    @classmethod
    def for_instance(cls, instance: Instance, reps: int = 1, discount: float = 0.9) -> "WIQL":
        return cls(instance.n_agents, instance.n_states, instance.budget, discount, reps)

    def epsilon(self, t: int) -> float:
        return self.M / (self.M + t)

    def choose(self, t, state, draws):
        q = self.Q[self._rr, self._mm, state]
        greedy = indicator(top_b(q[..., 1] - q[..., 0], self.B), self.M)
        rand = subset_from_keys(draws[:, 1:], self.B)
        return np.where((draws[:, 0] < self.epsilon(t))[:, None], rand, greedy)

    def observe(self, t, state, action, next_state, rewards, next_rewards):
        rr, mm = self._rr, self._mm
        a = np.asarray(action, dtype=np.int64)
        alpha = 1.0 / (1.0 + self.n[rr, mm, state, a])
        target = rewards + self.beta * self.Q[rr, mm, next_state].max(axis=-1)
        q = self.Q[rr, mm, state, a]
        self.Q[rr, mm, state, a] = q + alpha * (target - q)
        self.n[rr, mm, state, a] += 1

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.Q, self.n, np.array([self._next_t])):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()
