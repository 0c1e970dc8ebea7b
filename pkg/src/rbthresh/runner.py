"""Experiment configuration, the (instance x policy) work grid and its outputs.

A cell simulates every repetition of one policy on one instance in lockstep.
Repetition ``r`` of instance ``i`` uses environment seed
``derive_seed(master, kind, "env", i, r)`` for every policy (common random
numbers) and policy seed ``derive_seed(master, kind, "policy", i, r, label)``.
Cells are independent, so worker count and completion order do not change
any output byte apart from wall-clock fields in the manifest.
"""

from __future__ import annotations

import json
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import __version__
from .core import (NoiseModel, content_hash, derive_seed, gen_multi_state_instance, gen_regret_instance,
                   gen_two_state_instance, instance_to_json)
from .env import Simulator, simulate
from .metrics import Moments, average_reward_series, cumulative_regret, curves_to_csv
from .policies import WIQL, EpsGreedyThresholding, OracleGreedy, RandomPolicy, ReferencePolicy
from .svg import render
from .whittle import OracleWhittle, index_table

CONFIG_SCHEMA = 1
KINDS = ("reward-benchmark", "regret-curve", "verify-theorem1", "verify-counterexamples",
         "ablation-eta", "gamma-sweep")
POLICIES = ("eps-gt", "wiql", "random", "oracle-greedy", "oracle-whittle", "reference")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "reward-benchmark"
    M: int = 50
    S: int = 2
    B: tuple = (10,)
    T: int = 1000
    instances: int = 10
    reps: int = 5
    noise_std: float = 0.0
    gamma: tuple = (-0.9,)
    eta: float = 1.0
    etas: tuple = (0.1, 0.5, 1.0, 1.5)
    D: float = 0.0          # 0 selects max(8M/B, 8M/(M-B), 2)
    p: float = 1.0
    thetas: tuple = (0.1, 0.5, 0.9)
    policies: tuple = POLICIES
    discount: float = 0.9
    trials: int = 200
    master_seed: int = 0
    out: str = "out"
    workers: int = 1
    plots: bool = True
    schema_version: int = CONFIG_SCHEMA

    def __post_init__(self):
        for name in ("B", "gamma", "etas", "thetas", "policies"):
            v = getattr(self, name)
            object.__setattr__(self, name, tuple(v) if isinstance(v, (list, tuple)) else (v,))
        self.validate()

    def validate(self):
        if self.schema_version != CONFIG_SCHEMA:
            raise ConfigError(f"unsupported config schema_version {self.schema_version}")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        for name in ("M", "S", "T", "instances", "reps", "trials", "workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("B", "gamma", "thetas", "policies", "etas"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be non-empty")
        if any(not 1 <= b <= self.M for b in self.B):
            raise ConfigError("every budget must satisfy 1 <= B <= M")
        unknown = set(self.policies) - set(POLICIES)
        if unknown:
            raise ConfigError(f"unknown policies {sorted(unknown)}")
        if self.noise_std < 0 or self.eta <= 0 or self.p <= 0 or self.D < 0:
            raise ConfigError("noise_std, D must be >= 0 and eta, p > 0")
        if not 0 < self.discount < 1:
            raise ConfigError("discount must lie in (0, 1)")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer")

    # -- serialisation -----------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentConfig":
        try:
            d = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config is not valid TOML: {exc}") from None
        return cls.from_dict(d)

    def override(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


_DESK = {
    "reward-benchmark": dict(M=50, S=2, B=(10,), T=1000, instances=10, reps=5, gamma=(-0.9,)),
    "gamma-sweep": dict(M=50, S=2, B=(10,), T=1000, instances=10, reps=5, gamma=(-0.9, 0.9),
                        policies=("eps-gt",)),
    "ablation-eta": dict(M=50, S=2, B=(10,), T=1000, instances=10, reps=5, gamma=(-0.9,),
                         etas=(0.1, 0.5, 1.0, 1.5), policies=("eps-gt",)),
    "regret-curve": dict(M=2, S=2, B=(1,), T=2000, instances=10, reps=100, thetas=(0.1, 0.5, 0.9),
                         policies=("eps-gt",)),
    "verify-theorem1": dict(trials=200),
    "verify-counterexamples": dict(reps=300, T=20),
}
_FULL = {
    "reward-benchmark": dict(B=(5, 10, 20), instances=50, reps=13),
    "gamma-sweep": dict(B=(5, 10, 20), instances=50, reps=13),
    "ablation-eta": dict(B=(5, 10, 20), instances=50, reps=13),
}


def preset(kind: str, name: str = "desk") -> ExperimentConfig:
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    if name not in ("desk", "paper"):
        raise ConfigError(f"unknown preset {name!r}")
    kw = dict(_DESK[kind])
    if name == "paper":
        kw.update(_FULL.get(kind, {}))
    return ExperimentConfig(kind=kind, **kw)


# ---------------------------------------------------------------------------
# instances and cells
# ---------------------------------------------------------------------------

def noise_model(cfg: ExperimentConfig) -> NoiseModel:
    return NoiseModel("gaussian", cfg.noise_std) if cfg.noise_std > 0 else NoiseModel()


def make_instances(cfg: ExperimentConfig) -> list:
    """(name, instance, extra) triples for the run; instance budget is set per cell."""
    out = []
    for i in range(cfg.instances):
        seed = derive_seed(cfg.master_seed, cfg.kind, "instance", i)
        if cfg.kind == "regret-curve":
            ri = gen_regret_instance(seed, cfg.thetas, horizon=cfg.T, noise=noise_model(cfg))
            out.append((f"instance_{i:03d}", ri.instance, {"gammas": list(ri.gammas), "deltas": list(ri.deltas),
                                                           "thetas": list(ri.thetas)}))
        elif cfg.S == 2:
            inst = gen_two_state_instance(cfg.M, seed, budget=cfg.B[0], horizon=cfg.T,
                                          threshold=cfg.gamma[0], noise=noise_model(cfg))
            out.append((f"instance_{i:03d}", inst, {}))
        else:
            inst = gen_multi_state_instance(cfg.M, cfg.S, seed, budget=cfg.B[0], horizon=cfg.T,
                                            threshold=cfg.gamma[0], noise=noise_model(cfg))
            out.append((f"instance_{i:03d}", inst, {}))
    return out


@dataclass(frozen=True)
class Cell:
    group: str          # curve file the result belongs to
    label: str          # line label inside that file
    policy: str
    instance: int
    budget: int
    gamma: float
    eta: float
    metric: str         # "reward" or "regret"


def make_cells(cfg: ExperimentConfig, instances) -> list:
    cells = []
    for i, (_, inst, extra) in enumerate(instances):
        if cfg.kind == "regret-curve":
            for th, g in zip(extra["thetas"], extra["gammas"]):
                for pol in cfg.policies:
                    cells.append(Cell("regret", f"{pol}[theta={th:g}]", pol, i, inst.budget, g, cfg.eta, "regret"))
            continue
        for b in cfg.B:
            group = f"reward_B{b}"
            if cfg.kind == "reward-benchmark":
                for pol in cfg.policies:
                    cells.append(Cell(group, pol, pol, i, b, cfg.gamma[0], cfg.eta, "reward"))
            elif cfg.kind == "gamma-sweep":
                for g in cfg.gamma:
                    cells.append(Cell(group, f"eps-gt[gamma={g:g}]", "eps-gt", i, b, g, cfg.eta, "reward"))
            elif cfg.kind == "ablation-eta":
                for e in cfg.etas:
                    cells.append(Cell(group, f"eps-gt[eta={e:g}]", "eps-gt", i, b, cfg.gamma[0], e, "reward"))
    return cells


def build_policy(name: str, inst, cfg: ExperimentConfig, reps: int, eta: float):
    if name == "eps-gt":
        return EpsGreedyThresholding.for_instance(inst, reps=reps, D=cfg.D or None, p=cfg.p, eta=eta)
    if name == "wiql":
        return WIQL.for_instance(inst, reps=reps, discount=cfg.discount)
    if name == "random":
        return RandomPolicy.for_instance(inst, reps=reps)
    if name == "oracle-greedy":
        return OracleGreedy.for_instance(inst, reps=reps)
    if name == "oracle-whittle":
        return OracleWhittle.for_instance(inst, reps=reps, table=index_table(inst, cfg.discount))
    if name == "reference":
        return ReferencePolicy.for_instance(inst, reps=reps)
    raise ConfigError(f"unknown policy {name!r}")


def cell_seeds(cfg: ExperimentConfig, cell: Cell) -> tuple:
    env = [derive_seed(cfg.master_seed, cfg.kind, "env", cell.instance, r) for r in range(cfg.reps)]
    pol = [derive_seed(cfg.master_seed, cfg.kind, "policy", cell.instance, r, cell.label, cell.budget)
           for r in range(cfg.reps)]
    return env, pol


def run_cell(cfg: ExperimentConfig, inst, cell: Cell) -> np.ndarray:
    """Metric series for every repetition of one cell, shape (reps, T+1)."""
    inst = replace(inst, budget=cell.budget, threshold=cell.gamma)
    env_seeds, pol_seeds = cell_seeds(cfg, cell)
    policy = build_policy(cell.policy, inst, cfg, cfg.reps, cell.eta)
    bt = simulate(inst, policy, [np.random.default_rng(s) for s in env_seeds],
                  [np.random.default_rng(s) for s in pol_seeds], sim=Simulator(inst))
    if cell.metric == "regret":
        return np.vstack([cumulative_regret(bt[r], inst, warn=False) for r in range(len(bt))])
    return np.vstack([average_reward_series(bt[r]) for r in range(len(bt))])


def _cell_worker(args):
    cfg, inst, cell = args
    try:
        return cell, run_cell(cfg, inst, cell), None
    except Exception as exc:  # isolate: one bad cell must not sink the grid
        return cell, None, {"type": type(exc).__name__, "message": str(exc),
                            "traceback": traceback.format_exc(limit=5)}


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _finite(v):
    return None if v is None or (isinstance(v, float) and not math.isfinite(v)) else v


def generate(cfg: ExperimentConfig, out: Path | None = None) -> list:
    """Write ``instances/*.json``; returns (name, sha256) pairs."""
    out = Path(out or cfg.out)
    hashes = []
    for name, inst, extra in make_instances(cfg):
        text = instance_to_json(inst)
        _write(out / "instances" / f"{name}.json", text)
        hashes.append({"name": name, "sha256": content_hash(text), **extra})
    return hashes


def run(cfg: ExperimentConfig, out: Path | None = None, log=None) -> dict:
    """Execute the experiment and write the output bundle; returns the manifest."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    manifest = {"schema_version": 1, "package_version": __version__, "config": cfg.to_dict(),
                "conventions": {"initial_state": "all zeros", "average_reward_divisor": "t+1",
                                "log": "natural", "regret": "realised cumulative cost"},
                "complete": False, "started_unix": started}
    _write(out / "manifest.json", _json(manifest))

    if cfg.kind in ("verify-theorem1", "verify-counterexamples"):
        report = _verify(cfg)
        name = "theorem1" if cfg.kind == "verify-theorem1" else "counterexamples"
        _write(out / "reports" / f"{name}.json", _json(report))
        manifest.update(complete=True, passed=report["passed"], reports=[f"reports/{name}.json"])
        manifest["finished_unix"] = time.time()
        manifest["wall_seconds"] = manifest["finished_unix"] - started
        _write(out / "manifest.json", _json(manifest))
        return manifest

    instances = make_instances(cfg)
    hashes = generate(cfg, out)
    cells = make_cells(cfg, instances)
    jobs = [(cfg, instances[c.instance][1], c) for c in cells]
    results, failures = {}, []
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            for cell, series, err in ex.map(_cell_worker, jobs, chunksize=1):
                _collect(cell, series, err, results, failures, log)
    else:
        for job in jobs:
            _collect(*_cell_worker(job), results, failures, log)

    curves, summary = {}, {}
    groups = sorted({c.group for c in cells})
    for g in groups:
        labels = list(dict.fromkeys(c.label for c in cells if c.group == g))
        per_label = {}
        for lab in labels:
            mom = None
            for c in sorted((c for c in cells if c.group == g and c.label == lab), key=lambda c: c.instance):
                if c in results:
                    m = Moments.of(results[c])
                    mom = m if mom is None else mom.merge(m)
            if mom is not None:
                per_label[lab] = mom.curve()
        if not per_label:
            continue
        csv_text = curves_to_csv(per_label)
        _write(out / "curves" / f"{g}.csv", csv_text)
        curves[g] = per_label
        if cfg.plots:
            ylabel = "cumulative regret" if g == "regret" else "average cumulative reward"
            _write(out / "plots" / f"{g}.svg", render(per_label, title=f"{cfg.kind} {g}", ylabel=ylabel))
        summary[g] = {lab: _curve_summary(c, cfg) for lab, c in per_label.items()}
    if cfg.kind == "regret-curve":
        deltas = {}
        for name, inst, extra in instances:
            for th, d in zip(extra["thetas"], extra["deltas"]):
                deltas.setdefault(f"{th:g}", []).append(d)
        summary["mean_delta_by_theta"] = {k: float(np.mean(v)) for k, v in deltas.items()}
    _write(out / "reports" / "summary.json", _json(summary))

    status = {f"{c.group}/{c.label}/instance_{c.instance:03d}": ("ok" if c in results else "failed") for c in cells}
    seeds = {}
    for c in cells:
        env_s, pol_s = cell_seeds(cfg, c)
        seeds[f"{c.group}/{c.label}/instance_{c.instance:03d}"] = {"env": env_s, "policy": pol_s}
    manifest.update(instances=hashes, cells=status, seeds=seeds, failures=failures,
                    complete=not failures, curves=[f"curves/{g}.csv" for g in curves])
    manifest["finished_unix"] = time.time()
    manifest["wall_seconds"] = manifest["finished_unix"] - started
    _write(out / "manifest.json", _json(manifest))
    return manifest


def _collect(cell, series, err, results, failures, log):
    if err is None:
        results[cell] = series
    else:
        failures.append({"cell": asdict(cell), **err})
    if log:
        log(f"{cell.group} {cell.label} instance {cell.instance}: {'ok' if err is None else 'FAILED'}")


def _curve_summary(c, cfg) -> dict:
    T = len(c.y) - 1
    d = {"final_mean": float(c.y[-1]), "final_stderr": _finite(float(c.y_err[-1])), "n": c.n}
    if T >= 2:
        half = T // 2
        d["mean_at_half"] = float(c.y[half])
        if c.y[half] > 0:
            d["ratio_final_to_half"] = float(c.y[-1] / c.y[half])
    return d


def _verify(cfg: ExperimentConfig) -> dict:
    from . import exact
    if cfg.kind == "verify-theorem1":
        return exact.verify_theorem1(cfg.trials, seed=cfg.master_seed)
    three = exact.verify_counterexample_three_state()
    two = exact.verify_counterexample_two_type(cfg.T, cfg.reps, seed=cfg.master_seed)
    mc_ok = all(abs(two["monte_carlo"][k]["mean"] - two["exact"][k]) <= 3 * two["monte_carlo"][k]["se"]
                for k in two["exact"])
    rep_ok = all(abs(two["reported"][k] - two["exact"][k]) <= 3 * two["monte_carlo"][k]["se"] for k in two["exact"])
    two.update(monte_carlo_ok=mc_ok, reported_ok=rep_ok, passed=two["ordering_ok"] and mc_ok and rep_ok)
    return {"three_state": three, "two_type": two, "passed": three["passed"] and two["passed"]}


def resolve_workers(flag: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get("RB_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"RB_WORKERS must be an integer, got {env!r}") from None
    return None
