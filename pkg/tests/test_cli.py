import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbthresh import cli, runner
from rbthresh.metrics import Curve, curves_from_csv, curves_to_csv
from rbthresh.runner import ConfigError, ExperimentConfig
from rbthresh.svg import PALETTE, render

DATA = Path(__file__).parent / "data"


def tiny(kind="reward-benchmark", **kw):
    base = dict(kind=kind, M=6, S=2, B=(2,), T=30, instances=2, reps=3, gamma=(-0.9,))
    base.update(kw)
    return ExperimentConfig(**base)


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(runner.KINDS), M=st.integers(2, 60), T=st.integers(1, 5000),
       seed=st.integers(0, 2 ** 64 - 1), noise=st.floats(0, 3), gam=st.lists(st.floats(-5, 5), min_size=1, max_size=3),
       pols=st.lists(st.sampled_from(runner.POLICIES), min_size=1, max_size=6, unique=True))
def test_config_round_trip(kind, M, T, seed, noise, gam, pols):
    cfg = ExperimentConfig(kind=kind, M=M, B=(1, M), T=T, master_seed=seed, noise_std=noise, gamma=tuple(gam),
                           policies=tuple(pols))
    assert ExperimentConfig.from_toml(cfg.to_toml()) == cfg


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(kind="nope")
    with pytest.raises(ConfigError):
        ExperimentConfig(M=5, B=(6,))
    with pytest.raises(ConfigError):
        ExperimentConfig(reps=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(gamma=())
    with pytest.raises(ConfigError):
        ExperimentConfig(policies=("ucb",))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"kind": "reward-benchmark", "bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_toml("kind = ")
    with pytest.raises(ConfigError):
        ExperimentConfig(schema_version=2)


def test_presets():
    desk = runner.preset("reward-benchmark")
    assert (desk.M, desk.B, desk.T, desk.instances, desk.reps) == (50, (10,), 1000, 10, 5)
    paper = runner.preset("reward-benchmark", "paper")
    assert paper.B == (5, 10, 20) and paper.instances == 50 and paper.reps == 13
    reg = runner.preset("regret-curve")
    assert (reg.M, reg.B, reg.T, reg.instances, reg.reps) == (2, (1,), 2000, 10, 100)


def test_render_golden_constant():
    c = Curve(np.arange(5), np.full(5, 2.0), np.full(5, np.nan), 1)
    assert render({"const": c}, title="constant", ylabel="y") == (DATA / "constant.svg").read_text()


def test_render_empty():
    with pytest.raises(ValueError):
        render({})


def test_render_band_and_palette():
    c = Curve(np.arange(3), np.array([0.0, 1.0, 2.0]), np.array([0.1, 0.1, 0.1]), 4)
    svg = render({"a": c, "b": c})
    assert svg.count("<polygon") == 2 and PALETTE[0] in svg and PALETTE[1] in svg
    assert len(PALETTE) == 8


def test_plot_idempotent_and_errors(tmp_path, capsys):
    curves = {"a": Curve(np.arange(4), np.arange(4.0), np.full(4, 0.5), 3)}
    src = tmp_path / "curves" / "demo.csv"
    src.parent.mkdir()
    src.write_text(curves_to_csv(curves))
    assert cli.main(["plot", str(src)]) == 0
    first = (tmp_path / "plots" / "demo.svg").read_bytes()
    assert cli.main(["plot", str(src)]) == 0
    assert (tmp_path / "plots" / "demo.svg").read_bytes() == first
    bad = tmp_path / "bad.csv"
    bad.write_text("t,policy,mean,stderr,n\n0,a,1.0,,1\n1,a,oops,,1\n")
    assert cli.main(["plot", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "row 3" in err["message"]
    assert not (tmp_path / "o" / "bad.svg").exists()
    empty = tmp_path / "empty.csv"
    empty.write_text("t,policy,mean,stderr,n\n")
    assert cli.main(["plot", str(empty), "--out", str(tmp_path / "e")]) == 2
    assert not (tmp_path / "e" / "empty.svg").exists()


def test_run_bundle(tmp_path):
    cfg = tiny(out=str(tmp_path))
    man = runner.run(cfg)
    assert man["complete"]
    curves = curves_from_csv((tmp_path / "curves" / "reward_B2.csv").read_text())
    assert list(curves) == list(runner.POLICIES)
    assert all(c.n == 6 and len(c.y) == 31 for c in curves.values())
    assert len(list((tmp_path / "instances").glob("*.json"))) == 2
    assert (tmp_path / "plots" / "reward_B2.svg").exists()
    summary = json.loads((tmp_path / "reports" / "summary.json").read_text())
    assert set(summary["reward_B2"]) == set(runner.POLICIES)
    saved = json.loads((tmp_path / "manifest.json").read_text())
    assert ExperimentConfig.from_dict(saved["config"]) == cfg
    assert len(saved["seeds"]) == 12


def test_single_cell_rerun_matches_bundle(tmp_path):
    cfg = tiny(out=str(tmp_path))
    runner.run(cfg)
    inst = runner.make_instances(cfg)
    cell = next(c for c in runner.make_cells(cfg, inst) if c.policy == "eps-gt" and c.instance == 1)
    series = runner.run_cell(cfg, inst[1][1], cell)
    assert series.shape == (3, 31)
    again = runner.run_cell(cfg, inst[1][1], cell)
    assert np.array_equal(series, again)


def test_worker_count_determinism(tmp_path):
    outs = []
    for w in (1, 3):
        d = tmp_path / f"w{w}"
        runner.run(tiny(out=str(d), workers=w, noise_std=1.0, B=(1, 3)))
        outs.append(d)
    for f in sorted((outs[0] / "curves").glob("*.csv")):
        assert f.read_bytes() == (outs[1] / "curves" / f.name).read_bytes()
    for f in sorted((outs[0] / "plots").glob("*.svg")):
        assert f.read_bytes() == (outs[1] / "plots" / f.name).read_bytes()
    assert (outs[0] / "reports" / "summary.json").read_bytes() == (outs[1] / "reports" / "summary.json").read_bytes()


def test_crash_isolated(tmp_path, monkeypatch):
    real = runner.run_cell

    def flaky(cfg, inst, cell):
        if cell.policy == "wiql" and cell.instance == 0:
            raise RuntimeError("boom")
        return real(cfg, inst, cell)
    monkeypatch.setattr(runner, "run_cell", flaky)
    man = runner.run(tiny(out=str(tmp_path)))
    assert not man["complete"]
    assert man["cells"]["reward_B2/wiql/instance_000"] == "failed"
    assert man["cells"]["reward_B2/wiql/instance_001"] == "ok"
    assert len(man["failures"]) == 1 and "boom" in man["failures"][0]["message"]
    curves = curves_from_csv((tmp_path / "curves" / "reward_B2.csv").read_text())
    assert curves["wiql"].n == 3 and curves["eps-gt"].n == 6


def test_other_kinds(tmp_path):
    for kind, kw in (("gamma-sweep", dict(gamma=(-0.9, 0.9), policies=("eps-gt",))),
                     ("ablation-eta", dict(etas=(0.5, 1.0), policies=("eps-gt",))),
                     ("regret-curve", dict(M=2, B=(1,), T=50, policies=("eps-gt", "reference")))):
        man = runner.run(tiny(kind, out=str(tmp_path / kind), **kw))
        assert man["complete"], kind
    reg = curves_from_csv((tmp_path / "regret-curve" / "curves" / "regret.csv").read_text())
    assert {k for k in reg if k.startswith("reference")} == {"reference[theta=0.1]", "reference[theta=0.5]",
                                                              "reference[theta=0.9]"}
    assert all(np.all(c.y == 0) for k, c in reg.items() if k.startswith("reference"))


def test_cli_run_and_dump(tmp_path, capsys):
    cfg_path = tmp_path / "c.toml"
    cfg_path.write_text(tiny(out=str(tmp_path / "o"), policies=("random", "eps-gt")).to_toml())
    assert cli.main(["run", "--config", str(cfg_path), "--seed", "7", "--no-plots"]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["complete"] and out["curves"] == ["curves/reward_B2.csv"]
    assert not (tmp_path / "o" / "plots").exists()
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["config"]["master_seed"] == 7
    assert cli.main(["run", "--config", str(cfg_path), "--dump-config", "--workers", "2"]) == 0
    dumped = ExperimentConfig.from_toml(capsys.readouterr().out)
    assert dumped.workers == 2


def test_cli_env_workers(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("RB_WORKERS", "3")
    assert cli.main(["run", "--kind", "regret-curve", "--dump-config"]) == 0
    assert ExperimentConfig.from_toml(capsys.readouterr().out).workers == 3
    monkeypatch.setenv("RB_WORKERS", "x")
    assert cli.main(["run", "--kind", "regret-curve", "--dump-config"]) == 2


def test_cli_bad_config(tmp_path, capsys):
    out = tmp_path / "o"
    out.mkdir()
    cfg_path = tmp_path / "c.toml"
    cfg_path.write_text('kind = "reward-benchmark"\nM = 3\nB = [5]\n')
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(out)]) == 2
    rec = json.loads((out / "reports" / "error.json").read_text())
    assert rec["error"] == "ConfigError"


def test_cli_gen(tmp_path):
    assert cli.main(["gen", "--kind", "regret-curve", "--out", str(tmp_path)]) == 0
    assert len(list((tmp_path / "instances").glob("*.json"))) == 10


def test_cli_verify_theorem1(tmp_path, capsys):
    assert cli.main(["verify", "theorem1", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "reports" / "theorem1.json").read_text())
    assert rep["trials"] == 200 and rep["violations"] == []
