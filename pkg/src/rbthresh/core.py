"""Problem instances: agent models, validation, generators and seeding.

An agent is a two-action MDP ``(P_0, P_1, R)`` over a shared finite state
space.  An :class:`Instance` bundles ``M`` agents with the per-step budget
``B``, horizon ``T``, threshold ``gamma`` and the reward noise law.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

SCHEMA_VERSION = 1
ROW_TOL = 1e-12


class InstanceError(ValueError):
    """Raised for malformed agent models or instances."""


class GenerationError(RuntimeError):
    """Raised when rejection sampling exhausts its draw budget."""


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------

def _path_word(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        raise TypeError("seed path parts must be ints or strings")
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("seed path integers must be non-negative")
        return int(part)
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(master_seed: int, *path) -> int:
    """Map ``(master_seed, path...)`` to a 64-bit seed.

    String path parts are hashed with 8-byte BLAKE2b; the words are then
    mixed by numpy's ``SeedSequence``.  Equal paths give equal seeds and
    different paths give independent streams.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(_path_word(p) for p in path))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def make_rng(master_seed: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *path))


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    path: tuple = ()

    def child(self, *parts) -> "SeedSpec":
        return SeedSpec(self.master_seed, self.path + tuple(parts))

    @property
    def seed(self) -> int:
        return derive_seed(self.master_seed, *self.path)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------

def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AgentModel:
    """One agent: ``transitions[a, s, s']`` and expected ``rewards[s]``."""

    transitions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        P = _frozen(self.transitions)
        R = _frozen(self.rewards)
        if P.ndim != 3 or P.shape[0] != 2 or P.shape[1] != P.shape[2]:
            raise InstanceError(f"transitions must have shape (2, S, S), got {P.shape}")
        if R.shape != (P.shape[1],):
            raise InstanceError(f"rewards must have shape ({P.shape[1]},), got {R.shape}")
        if P.shape[1] < 1:
            raise InstanceError("empty state space")
        if not np.all(np.isfinite(P)) or np.any(P < 0.0) or np.any(P > 1.0):
            raise InstanceError("transition probabilities must lie in [0, 1]")
        bad = np.abs(P.sum(axis=2) - 1.0) > ROW_TOL
        if np.any(bad):
            a, s = np.argwhere(bad)[0]
            raise InstanceError(f"row P_{a}[{s}] sums to {P[a, s].sum()!r}, not 1")
        if not np.all(np.isfinite(R)):
            raise InstanceError("rewards must be finite")
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", R)

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    def __eq__(self, other):
        if not isinstance(other, AgentModel):
            return NotImplemented
        return np.array_equal(self.transitions, other.transitions) and np.array_equal(self.rewards, other.rewards)

    __hash__ = None


@dataclass(frozen=True)
class NoiseModel:
    """Reward noise: ``deterministic`` or zero-mean ``gaussian``.

    ``std`` is either a scalar or one value per state.
    """

    kind: str = "deterministic"
    std: float | tuple = 0.0

    def __post_init__(self):
        if self.kind not in ("deterministic", "gaussian"):
            raise InstanceError(f"unknown noise kind {self.kind!r}")
        std = self.std
        if isinstance(std, (list, tuple, np.ndarray)):
            std = tuple(float(x) for x in std)
            vals = std
        else:
            std = float(std)
            vals = (std,)
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise InstanceError("noise std must be finite and >= 0")
        if self.kind == "deterministic" and any(v != 0 for v in vals):
            raise InstanceError("deterministic noise requires std = 0")
        object.__setattr__(self, "std", std)

    def std_vector(self, n_states: int) -> np.ndarray:
        if isinstance(self.std, tuple):
            if len(self.std) != n_states:
                raise InstanceError(f"per-state std has {len(self.std)} entries for {n_states} states")
            return np.array(self.std)
        return np.full(n_states, self.std)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "std": list(self.std) if isinstance(self.std, tuple) else self.std}


@dataclass(frozen=True)
class Instance:
    agents: tuple
    budget: int
    horizon: int
    threshold: float = 0.0
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        agents = tuple(self.agents)
        if not agents:
            raise InstanceError("an instance needs at least one agent")
        if any(not isinstance(a, AgentModel) for a in agents):
            raise InstanceError("agents must be AgentModel objects")
        S = agents[0].n_states
        if any(a.n_states != S for a in agents):
            raise InstanceError("all agents must share the same state space size")
        B, T = int(self.budget), int(self.horizon)
        if not 1 <= B <= len(agents):
            raise InstanceError(f"budget must satisfy 1 <= B <= M, got B={B}, M={len(agents)}")
        if T < 1:
            raise InstanceError(f"horizon must be >= 1, got {T}")
        if math.isnan(float(self.threshold)):
            raise InstanceError("threshold is NaN")
        self.noise.std_vector(S)
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "budget", B)
        object.__setattr__(self, "horizon", T)
        object.__setattr__(self, "threshold", float(self.threshold))

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def n_states(self) -> int:
        return self.agents[0].n_states

    @cached_property
    def P(self) -> np.ndarray:
        """Stacked transitions, shape ``(M, 2, S, S)``."""
        return _frozen(np.stack([a.transitions for a in self.agents]))

    @cached_property
    def R(self) -> np.ndarray:
        """Stacked expected rewards, shape ``(M, S)``."""
        return _frozen(np.stack([a.rewards for a in self.agents]))

    @cached_property
    def incremental(self) -> np.ndarray:
        """Incremental rewards ``I[m, s]``."""
        phi = np.einsum("mast,mt->mas", self.P, self.R)
        return _frozen(phi[:, 1, :] - phi[:, 0, :])

    @cached_property
    def noise_std(self) -> np.ndarray:
        return _frozen(self.noise.std_vector(self.n_states))

    def with_threshold(self, gamma: float) -> "Instance":
        return replace(self, threshold=gamma)

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (self.agents == other.agents and self.budget == other.budget
                and self.horizon == other.horizon and self.threshold == other.threshold
                and self.noise == other.noise)

    __hash__ = None


def check_action(action, budget: int, n_agents: int) -> np.ndarray:
    """Validate a binary action vector summing to exactly ``budget``."""
    a = np.asarray(action)
    if a.shape != (n_agents,):
        raise ValueError(f"action must have shape ({n_agents},), got {a.shape}")
    if np.any((a != 0) & (a != 1)):
        raise ValueError("action entries must be 0 or 1")
    if int(a.sum()) != budget:
        raise ValueError(f"action uses {int(a.sum())} units of budget, expected exactly {budget}")
    return a


def check_state(state, instance: Instance) -> np.ndarray:
    s = np.asarray(state)
    if s.shape != (instance.n_agents,):
        raise ValueError(f"joint state must have length {instance.n_agents}")
    if np.any(s < 0) or np.any(s >= instance.n_states):
        raise ValueError(f"state indices must lie in [0, {instance.n_states})")
    return s


# ---------------------------------------------------------------------------
# incremental rewards and the good set
# ---------------------------------------------------------------------------

def incremental_reward(agent: AgentModel, s: int) -> float:
    """``I(s) = sum_s' (P_1(s, s') - P_0(s, s')) R(s')``."""
    if not 0 <= s < agent.n_states:
        raise IndexError(f"state {s} out of range for {agent.n_states} states")
    P, R = agent.transitions, agent.rewards
    return float(P[1, s] @ R - P[0, s] @ R)


@dataclass(frozen=True)
class GoodSet:
    pairs: frozenset
    delta: float
    gaps: np.ndarray

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self.pairs

    def __len__(self) -> int:
        return len(self.pairs)


def good_set(instance: Instance) -> GoodSet:
    """Agent-state pairs whose incremental reward clears the threshold.

    ``delta`` is the smallest margin ``I - gamma`` over good pairs (``inf``
    when there are none); ``gaps[m, s] = |gamma - I[m, s]|``.
    """
    I, gamma = instance.incremental, instance.threshold
    mask = I >= gamma
    pairs = frozenset((int(m), int(s)) for m, s in zip(*np.nonzero(mask)))
    delta = float(np.min(I[mask] - gamma)) if pairs else math.inf
    with np.errstate(invalid="ignore"):
        gaps = np.abs(gamma - I)
    return GoodSet(pairs, delta, gaps)


def check_assumption2(instance: Instance) -> tuple[bool, tuple | None]:
    """Does every joint state hold at least ``B`` good agents?

    The worst joint state puts each agent in its lowest-``I`` state, so the
    condition reduces to counting agents whose every state is good.  Returns
    ``(ok, witness)`` with a violating joint state when ``ok`` is false.
    """
    I = instance.incremental
    all_good = np.all(I >= instance.threshold, axis=1)
    if int(all_good.sum()) >= instance.budget:
        return True, None
    return False, tuple(int(s) for s in np.argmin(I, axis=1))


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _two_state_agent(p: np.ndarray) -> AgentModel:
    # p[a, s] = P_a(s, 1)
    P = np.stack([np.stack([1.0 - p[a], p[a]], axis=1) for a in range(2)])
    return AgentModel(P, np.array([0.0, 1.0]))


def gen_two_state_instance(M: int, seed, homogeneous: bool = False, *, budget: int = 1,
                           horizon: int = 100, threshold: float = 0.0,
                           noise: NoiseModel | None = None) -> Instance:
    """Random two-state instance with ``P_a(s, 1) ~ U(0, 1)`` and ``R(s) = s``."""
    if M < 1:
        raise InstanceError("M must be >= 1")
    rng = np.random.default_rng(seed)
    if homogeneous:
        agent = _two_state_agent(rng.random((2, 2)))
        agents = (agent,) * M
    else:
        draws = rng.random((M, 2, 2))
        agents = tuple(_two_state_agent(d) for d in draws)
    return Instance(agents, budget, horizon, threshold, noise or NoiseModel())


def gen_multi_state_instance(M: int, S: int, seed, *, budget: int = 1, horizon: int = 100,
                             threshold: float = 0.0, noise: NoiseModel | None = None) -> Instance:
    """Random ``S``-state instance; each row is a normalised vector of U(0,1) draws."""
    if M < 1 or S < 2:
        raise InstanceError("need M >= 1 and S >= 2")
    rng = np.random.default_rng(seed)
    u = rng.random((M, 2, S, S))
    P = u / u.sum(axis=3, keepdims=True)
    R = np.arange(S, dtype=float)
    agents = tuple(AgentModel(P[m], R) for m in range(M))
    return Instance(agents, budget, horizon, threshold, noise or NoiseModel())


def _relabel_states(agent: AgentModel, perm: Sequence[int]) -> AgentModel:
    # new state perm[s] is old state s
    inv = np.argsort(perm)
    P = agent.transitions[:, inv][:, :, inv]
    return AgentModel(P, agent.rewards[inv])


@dataclass(frozen=True)
class RegretInstance:
    instance: Instance
    thetas: tuple
    gammas: tuple
    deltas: tuple
    draws: int

    def for_theta(self, theta: float) -> Instance:
        return self.instance.with_threshold(self.gammas[self.thetas.index(theta)])


def gen_regret_instance(seed, thetas: Sequence[float] = (0.1, 0.5, 0.9), *, min_gap: float = 0.15,
                        horizon: int = 2000, noise: NoiseModel | None = None,
                        max_draws: int = 100_000) -> RegretInstance:
    """Two agents, budget one, with ``I1(1) >= I1(0) >= I2(1) >= I2(0)``.

    Draws two-state instances until one admits an ordering of agents and a
    (global) labelling of states satisfying the chain with
    ``I2(1) - I2(0) >= min_gap``.  Each ``theta`` gives the threshold
    ``gamma = theta * I2(1) + (1 - theta) * I2(0)``.
    """
    rng = np.random.default_rng(seed)
    thetas = tuple(float(t) for t in thetas)
    for draw in range(1, max_draws + 1):
        agents = [_two_state_agent(p) for p in rng.random((2, 2, 2))]
        for order, swap in itertools.product(((0, 1), (1, 0)), (False, True)):
            cand = [agents[i] for i in order]
            if swap:
                cand = [_relabel_states(a, (1, 0)) for a in cand]
            I = [[incremental_reward(a, s) for s in (0, 1)] for a in cand]
            if not (I[0][1] >= I[0][0] >= I[1][1] >= I[1][0]):
                continue
            if I[1][1] - I[1][0] < min_gap:
                continue
            gammas = tuple(t * I[1][1] + (1 - t) * I[1][0] for t in thetas)
            deltas = tuple(I[1][1] - g for g in gammas)
            inst = Instance(tuple(cand), 1, horizon, gammas[0], noise or NoiseModel())
            return RegretInstance(inst, thetas, gammas, deltas, draw)
    raise GenerationError(f"no admissible regret instance within {max_draws} draws")


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def instance_to_dict(instance: Instance) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "M": instance.n_agents,
        "S": instance.n_states,
        "B": instance.budget,
        "T": instance.horizon,
        "gamma": instance.threshold,
        "noise": instance.noise.to_dict(),
        "agents": [
            {"P0": a.transitions[0].tolist(), "P1": a.transitions[1].tolist(), "R": a.rewards.tolist()}
            for a in instance.agents
        ],
    }


def instance_from_dict(d: dict) -> Instance:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise InstanceError(f"unsupported schema_version {d.get('schema_version')!r}")
    agents = tuple(AgentModel(np.array([a["P0"], a["P1"]]), np.array(a["R"])) for a in d["agents"])
    noise = d.get("noise", {"kind": "deterministic", "std": 0.0})
    inst = Instance(agents, d["B"], d["T"], d["gamma"], NoiseModel(noise["kind"], noise["std"]))
    if inst.n_agents != d["M"] or inst.n_states != d["S"]:
        raise InstanceError("M/S header disagrees with the agent list")
    return inst


def instance_to_json(instance: Instance) -> str:
    # float repr is the shortest string that round-trips exactly
    return json.dumps(instance_to_dict(instance), indent=1, sort_keys=True) + "\n"


def instance_from_json(text: str) -> Instance:
    return instance_from_dict(json.loads(text))


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
