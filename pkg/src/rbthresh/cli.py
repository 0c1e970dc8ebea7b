"""Command line entry point: ``rbthresh {gen,run,plot,verify}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import runner
from .metrics import curves_from_csv
from .svg import render


def _base_config(args) -> runner.ExperimentConfig:
    if args.config:
        cfg = runner.ExperimentConfig.from_toml(Path(args.config).read_text(encoding="utf-8"))
        if args.kind and args.kind != cfg.kind:
            raise runner.ConfigError(f"--kind {args.kind} disagrees with config kind {cfg.kind}")
        if args.preset:
            raise runner.ConfigError("--preset and --config are mutually exclusive")
    else:
        cfg = runner.preset(args.kind or "reward-benchmark", args.preset or "desk")
    return cfg.override(master_seed=args.seed, out=args.out, workers=runner.resolve_workers(args.workers))


def _add_common(p):
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--preset", choices=("paper", "desk"), help="built-in parameter set (default desk)")
    p.add_argument("--kind", choices=runner.KINDS, help="experiment kind when no config file is given")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--workers", type=int, help="worker processes (falls back to $RB_WORKERS, then 1)")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rbthresh", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)
    g = sub.add_parser("gen", help="generate instances only")
    _add_common(g)
    r = sub.add_parser("run", help="run an experiment and write curves, plots and reports")
    _add_common(r)
    r.add_argument("--no-plots", action="store_true")
    r.add_argument("--dump-config", action="store_true", help="print the resolved config as TOML and exit")
    p = sub.add_parser("plot", help="render curve CSV files as SVG")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", help="output directory (default: plots/ beside each CSV's parent)")
    p.add_argument("--ylabel", default="")
    v = sub.add_parser("verify", help="exact optimality checks")
    v.add_argument("which", nargs="?", choices=("theorem1", "counterexamples", "all"), default="all")
    _add_common(v)
    return ap


def _error(exc: Exception, out: str | None) -> int:
    rec = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(rec), file=sys.stderr)
    if out and Path(out).is_dir():
        (Path(out) / "reports").mkdir(exist_ok=True)
        (Path(out) / "reports" / "error.json").write_text(json.dumps(rec, indent=1) + "\n")
    return 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = getattr(args, "out", None)
    try:
        if args.cmd == "plot":
            for path in args.csv:
                src = Path(path)
                curves = curves_from_csv(src.read_text(encoding="utf-8"))
                dest = Path(args.out) if args.out else src.parent.parent / "plots"
                dest.mkdir(parents=True, exist_ok=True)
                (dest / f"{src.stem}.svg").write_text(render(curves, title=src.stem, ylabel=args.ylabel),
                                                      encoding="utf-8")
            return 0
        if args.cmd == "verify":
            kinds = {"theorem1": ["verify-theorem1"], "counterexamples": ["verify-counterexamples"],
                     "all": ["verify-theorem1", "verify-counterexamples"]}[args.which]
            ok = True
            for k in kinds:
                args.kind = k
                cfg = _base_config(args)
                if len(kinds) > 1:
                    cfg = cfg.override(out=str(Path(cfg.out) / k))
                man = runner.run(cfg)
                print(f"{k}: {'PASS' if man['passed'] else 'FAIL'} ({cfg.out}/reports)")
                ok &= man["passed"]
            return 0 if ok else 1
        cfg = _base_config(args)
        out = cfg.out
        if args.cmd == "gen":
            hashes = runner.generate(cfg)
            print(f"wrote {len(hashes)} instances to {cfg.out}/instances")
            return 0
        if args.dump_config:
            sys.stdout.write(cfg.to_toml())
            return 0
        if args.no_plots:
            cfg = cfg.override(plots=False)
        man = runner.run(cfg, log=lambda msg: print(msg, file=sys.stderr))
        print(json.dumps({"out": cfg.out, "complete": man["complete"], "curves": man.get("curves", [])}))
        return 0 if man["complete"] else 1
    except (runner.ConfigError, ValueError, OSError) as exc:
        return _error(exc, out)


if __name__ == "__main__":
    sys.exit(main())
