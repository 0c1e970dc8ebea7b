"""Simulation of the joint restless-bandit process."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .core import Instance, check_action, check_state


class BudgetError(ValueError):
    """An action vector does not spend exactly the budget."""


@dataclass(frozen=True)
class Observation:
    """What a policy sees before choosing ``a_{t+1}``.

    ``last_rewards`` is ``r_t``; ``last_action`` is ``a_t`` (``None`` at t=0).
    """

    t: int
    state: np.ndarray
    last_rewards: np.ndarray
    last_action: np.ndarray | None = None


class Policy(Protocol):
    def act(self, obs: Observation, rng: np.random.Generator) -> np.ndarray: ...

    def update(self, obs: Observation, action: np.ndarray, next_obs: Observation) -> None: ...


@dataclass(frozen=True)
class StepOutcome:
    next_state: np.ndarray
    rewards: np.ndarray


class Simulator:
    """Precomputed per-instance sampling tables; cheap to reuse across rollouts.

    Randomness enters only through explicit uniforms ``u`` (transitions) and
    standard normals ``z`` (reward noise), so any leading batch shape works.
    """

    def __init__(self, instance: Instance):
        self.instance = instance
        M, S = instance.n_agents, instance.n_states
        cum = np.cumsum(instance.P, axis=3)
        cum[..., -1] = 1.0
        self._cum = cum                      # (M, 2, S, S)
        self._R = np.asarray(instance.R)
        self._std = np.asarray(instance.noise_std)
        self.noisy = instance.noise.kind == "gaussian" and bool(np.any(self._std > 0))
        self._idx = np.arange(M)
        self.n_agents, self.n_states = M, S

    def transition(self, state, action, u) -> np.ndarray:
        rows = self._cum[self._idx, action, state]          # (..., M, S)
        return np.minimum((rows <= u[..., None]).sum(axis=-1), self.n_states - 1)

    def emit(self, state, z=None) -> np.ndarray:
        r = self._R[self._idx, state]
        if self.noisy:
            r = r + self._std[state] * z
        return r

    def draw(self, rng: np.random.Generator, horizon: int):
        """Transition uniforms (T, M), then reward normals (T+1, M) if noisy."""
        U = rng.random((horizon, self.n_agents))
        Z = rng.standard_normal((horizon + 1, self.n_agents)) if self.noisy else None
        return U, Z

    def step(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator) -> StepOutcome:
        u = rng.random(self.n_agents)
        z = rng.standard_normal(self.n_agents) if self.noisy else None
        nxt = self.transition(state, action, u)
        return StepOutcome(nxt, self.emit(nxt, z))


def _checked_action(action, instance: Instance) -> np.ndarray:
    try:
        return check_action(action, instance.budget, instance.n_agents).astype(np.int64, copy=False)
    except ValueError as exc:
        raise BudgetError(str(exc)) from None


def step(instance: Instance, state, action, rng: np.random.Generator) -> StepOutcome:
    """One joint transition followed by reward emission at the new states."""
    s = check_state(state, instance).astype(np.int64)
    a = _checked_action(action, instance)
    return Simulator(instance).step(s, a, rng)


@dataclass(frozen=True)
class Trajectory:
    """``states[t]`` for t=0..T, ``actions[t-1]`` is a_t, ``rewards[t]`` is r_t."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @property
    def n_agents(self) -> int:
        return self.states.shape[1]

    def to_csv(self) -> str:
        """Long format: one row per (t, agent); action at t is a_{t+1} (empty at t=T)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "agent", "state", "action", "reward"])
        T = self.horizon
        for t in range(T + 1):
            for m in range(self.n_agents):
                a = int(self.actions[t, m]) if t < T else ""
                w.writerow([t, m, int(self.states[t, m]), a, repr(float(self.rewards[t, m]))])
        return buf.getvalue()


def rollout(instance: Instance, policy, initial_state=None, rng: np.random.Generator | None = None,
            policy_rng: np.random.Generator | None = None, sim: Simulator | None = None) -> Trajectory:
    """Run ``policy`` for ``instance.horizon`` decisions.

    ``rng`` drives transitions and rewards (drawn up front as blocks, see
    :meth:`Simulator.draw`), ``policy_rng`` the policy's own randomness.
    With separate generators every policy faces the same environment noise
    for a given seed.
    """
    if rng is None:
        rng = np.random.default_rng()
    if policy_rng is None:
        policy_rng = rng
    sim = sim or Simulator(instance)
    M, T = instance.n_agents, instance.horizon
    if initial_state is None:
        s = np.zeros(M, dtype=np.int64)
    else:
        s = check_state(initial_state, instance).astype(np.int64)
    U, Z = sim.draw(rng, T)
    if Z is None:
        Z = np.zeros((T + 1, M))

    states = np.empty((T + 1, M), dtype=np.int64)
    actions = np.empty((T, M), dtype=np.int8)
    rewards = np.empty((T + 1, M))
    states[0] = s
    rewards[0] = sim.emit(s, Z[0])

    obs = Observation(0, s, rewards[0], None)
    for t in range(T):
        a = _checked_action(policy.act(obs, policy_rng), instance)
        s2 = sim.transition(obs.state, a, U[t])
        r2 = sim.emit(s2, Z[t + 1])
        nxt = Observation(t + 1, s2, r2, a)
        policy.update(obs, a, nxt)
        states[t + 1], actions[t], rewards[t + 1] = s2, a, r2
        obs = nxt
    return Trajectory(states, actions, rewards)


@dataclass(frozen=True)
class BatchTrajectory:
    """``R`` trajectories of equal length stacked on a leading axis."""

    states: np.ndarray      # (R, T+1, M)
    actions: np.ndarray     # (R, T, M)
    rewards: np.ndarray     # (R, T+1, M)

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, r: int) -> Trajectory:
        return Trajectory(self.states[r], self.actions[r], self.rewards[r])


def simulate(instance: Instance, policy, env_rngs, policy_rngs, initial_state=None,
             sim: Simulator | None = None) -> BatchTrajectory:
    """Run ``len(env_rngs)`` repetitions of a lockstep policy together.

    Repetition ``r`` reproduces ``rollout(instance, <fresh single-run
    policy>, initial_state, env_rngs[r], policy_rngs[r])`` exactly: the
    same blocks are drawn from the same generators in the same order.
    """
    sim = sim or Simulator(instance)
    R, M, T, B = len(env_rngs), instance.n_agents, instance.horizon, instance.budget
    if len(policy_rngs) != R or getattr(policy, "R", R) != R:
        raise ValueError("policy, env and policy generators disagree on the number of repetitions")
    s0 = np.zeros(M, dtype=np.int64) if initial_state is None else check_state(initial_state, instance)
    drawn = [sim.draw(g, T) for g in env_rngs]
    U = np.stack([d[0] for d in drawn])
    Z = np.stack([d[1] for d in drawn]) if sim.noisy else np.zeros((R, T + 1, M))
    k = policy.n_uniforms
    W = np.stack([g.random((T, k)) for g in policy_rngs]) if k else np.empty((R, T, 0))

    states = np.empty((R, T + 1, M), dtype=np.int64)
    actions = np.empty((R, T, M), dtype=np.int8)
    rewards = np.empty((R, T + 1, M))
    s = np.broadcast_to(np.asarray(s0, dtype=np.int64), (R, M)).copy()
    states[:, 0] = s
    rewards[:, 0] = sim.emit(s, Z[:, 0])
    for t in range(T):
        a = np.asarray(policy.choose(t, s, W[:, t]))
        if a.shape != (R, M) or np.any((a != 0) & (a != 1)) or np.any(a.sum(axis=1) != B):
            raise BudgetError(f"step {t}: some repetition's action does not spend exactly B={B}")
        s2 = sim.transition(s, a, U[:, t])
        r2 = sim.emit(s2, Z[:, t + 1])
        policy.advance(t, s, a, s2, rewards[:, t], r2)
        states[:, t + 1], actions[:, t], rewards[:, t + 1] = s2, a, r2
        s = s2
    return BatchTrajectory(states, actions, rewards)
