"""Cost, regret and reward accounting, plus cross-run aggregation."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .core import Instance, check_assumption2
from .env import Trajectory


class AssumptionWarning(UserWarning):
    pass


def step_cost(instance: Instance, state, action) -> np.ndarray:
    """``c_m = (gamma - I_m(s_m)) [I_m(s_m) < gamma] [a_m = 1]``."""
    s = np.asarray(state)
    a = np.asarray(action)
    inc = instance.incremental[np.arange(instance.n_agents), s]
    gap = instance.threshold - inc
    return np.where((inc < instance.threshold) & (a == 1), gap, 0.0)


def step_costs(instance: Instance, traj: Trajectory) -> np.ndarray:
    """Per-step, per-agent costs, shape (T, M); row t prices a_{t+1} at s_t."""
    inc = instance.incremental[np.arange(instance.n_agents)[None, :], traj.states[:-1]]
    gap = instance.threshold - inc
    return np.where((inc < instance.threshold) & (traj.actions == 1), gap, 0.0)


def cumulative_regret(traj: Trajectory, instance: Instance, warn: bool = True) -> np.ndarray:
    """Running realised cost; entry t covers the first t decisions (length T+1).

    It estimates regret only when every joint state holds enough good
    agents; otherwise the reference policy pays too and a warning is issued.
    """
    if warn and not check_assumption2(instance)[0]:
        warnings.warn("instance has too few always-good agents: curve is cost, not regret",
                      AssumptionWarning, stacklevel=2)
    per_step = step_costs(instance, traj).sum(axis=1)
    return np.concatenate([[0.0], np.cumsum(per_step)])


def average_reward_series(traj: Trajectory) -> np.ndarray:
    """``y(t) = sum_{tau <= t} sum_m r_tau^m / (t + 1)`` for t = 0..T."""
    total = np.cumsum(traj.rewards.sum(axis=1))
    return total / np.arange(1, total.size + 1)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Curve:
    x: np.ndarray
    y: np.ndarray
    y_err: np.ndarray       # NaN when n == 1
    n: int

    def __post_init__(self):
        if not (len(self.x) == len(self.y) == len(self.y_err)):
            raise ValueError("curve arrays must have equal length")
        if self.n < 1:
            raise ValueError("a curve needs at least one run")


@dataclass(frozen=True)
class Moments:
    """Count, mean and centred sum of squares per column; mergeable."""

    n: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, runs) -> "Moments":
        X = np.sort(np.atleast_2d(np.asarray(runs, dtype=float)), axis=0)
        n = X.shape[0]
        if n == 0:
            raise ValueError("no runs to aggregate")
        mean = X.sum(axis=0) / n
        m2 = np.sort((X - mean) ** 2, axis=0).sum(axis=0)
        return cls(n, mean, m2)

    def merge(self, other: "Moments") -> "Moments":
        n = self.n + other.n
        d = other.mean - self.mean
        mean = self.mean + d * (other.n / n)
        m2 = self.m2 + other.m2 + d * d * (self.n * other.n / n)
        return Moments(n, mean, m2)

    def curve(self, x=None) -> Curve:
        if self.n > 1:
            err = np.sqrt(self.m2 / (self.n - 1) / self.n)
        else:
            err = np.full_like(self.mean, np.nan)
        x = np.arange(self.mean.size) if x is None else np.asarray(x)
        return Curve(x, self.mean, err, self.n)


def curve_from_runs(runs, x=None) -> Curve:
    """Mean and standard error per column; invariant to the order of runs."""
    return Moments.of(runs).curve(x)


def avg_cumulative_reward(trajectories: Iterable[Trajectory]) -> Curve:
    series = [average_reward_series(tr) for tr in trajectories]
    if not series:
        raise ValueError("no trajectories")
    if len({s.size for s in series}) != 1:
        raise ValueError("trajectories have different lengths")
    return curve_from_runs(np.vstack(series))


def aggregate(records: Iterable[tuple], key=lambda k: k) -> dict:
    """Group ``(labels, series)`` records by ``key(labels)`` into Curves."""
    groups: dict = {}
    for labels, series in records:
        groups.setdefault(key(labels), []).append(np.asarray(series, dtype=float))
    out = {}
    for k, rows in groups.items():
        if not rows:
            raise ValueError(f"empty group {k!r}")
        if len({r.size for r in rows}) != 1:
            raise ValueError(f"group {k!r} mixes series lengths")
        out[k] = curve_from_runs(np.vstack(rows))
    return out


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def curves_to_csv(curves: Mapping[str, Curve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "policy", "mean", "stderr", "n"])
    for name in curves:
        c = curves[name]
        for x, y, e in zip(c.x, c.y, c.y_err):
            w.writerow([int(x), name, _fmt(y), _fmt(e), c.n])
    return buf.getvalue()


class CurveFormatError(ValueError):
    pass


def curves_from_csv(text: str) -> dict:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["t", "policy", "mean", "stderr", "n"]:
        raise CurveFormatError(f"row 1: unexpected header {header!r}")
    cols: dict = {}
    for lineno, row in enumerate(reader, start=2):
        if len(row) != 5:
            raise CurveFormatError(f"row {lineno}: expected 5 fields, got {len(row)}")
        try:
            t, name, mean, err, n = int(row[0]), row[1], float(row[2]), float(row[3]) if row[3] else math.nan, int(row[4])
        except ValueError as exc:
            raise CurveFormatError(f"row {lineno}: {exc}") from None
        cols.setdefault(name, ([], [], [], n))
        xs, ys, es, n0 = cols[name]
        if n != n0:
            raise CurveFormatError(f"row {lineno}: run count changes within policy {name!r}")
        xs.append(t)
        ys.append(mean)
        es.append(err)
    return {k: Curve(np.array(v[0]), np.array(v[1]), np.array(v[2]), v[3]) for k, v in cols.items()}


# ---------------------------------------------------------------------------
# anytime concentration check
# ---------------------------------------------------------------------------

def anytime_bound(N, alpha: float):
    """``1.7 sqrt((ln ln 2N + 0.72 ln(10.4/alpha)) / N)``."""
    N = np.asarray(N, dtype=float)
    return 1.7 * np.sqrt((np.log(np.log(2.0 * N)) + 0.72 * np.log(10.4 / alpha)) / N)


def coverage_fraction(alphas=(0.1, 0.01), n_streams: int = 10_000, n_max: int = 10_000, seed: int = 0,
                      chunk: int = 250) -> dict:
    """Fraction of unit-gaussian streams whose running mean ever leaves the bound.

    The same streams are checked against every ``alpha``; checks run at
    ``N = 2..n_max``.
    """
    rng = np.random.default_rng(seed)
    N = np.arange(1, n_max + 1, dtype=float)
    bounds = {a: anytime_bound(N[1:], a) for a in alphas}
    hits = {a: 0 for a in alphas}
    done = 0
    while done < n_streams:
        k = min(chunk, n_streams - done)
        means = np.abs(np.cumsum(rng.standard_normal((k, n_max)), axis=1)[:, 1:] / N[1:])
        for a in alphas:
            hits[a] += int(np.any(means > bounds[a], axis=1).sum())
        done += k
    return {a: hits[a] / n_streams for a in alphas}
