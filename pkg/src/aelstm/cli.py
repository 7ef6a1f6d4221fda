"""Command line entry point: ``aelstm <subcommand>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import pipeline as pl
from .config import MODELS, RunConfig, model_id
from .preprocess import ConfigError

log = logging.getLogger("aelstm")


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aelstm", description="Tactile AE + LSTM motion-switching pipeline.")
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--run-dir", type=Path,
                   help=f"run directory (default: ${pl.OUTPUT_ENV}/<config hash>, ${pl.OUTPUT_ENV} defaults to ./runs)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. policy.epochs=500 (repeatable)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--paper-scale", action="store_true", help="16 joints and a 50,000 epoch limit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    sub.add_parser("generate", help="record expert demonstrations")
    s = sub.add_parser("train-ae", help="fit the scaler and train the tactile autoencoders")
    s.add_argument("--which", choices=["whole", "thumb", "both"], default="both")
    s = sub.add_parser("train-policy", help="train one ablation model")
    s.add_argument("--attention", type=_on_off, default=True, metavar="{on,off}")
    s.add_argument("--constraint", type=_on_off, default=True, metavar="{on,off}")
    s.add_argument("--gamma", type=float, help="constraint strength (default from config)")
    s = sub.add_parser("evaluate", help="closed-loop trials for a trained model")
    s.add_argument("--model", choices=list(MODELS), default="I")
    s.add_argument("--jobs", type=int)
    s = sub.add_parser("analyze", help="post-hoc analyses over exported traces/results")
    s.add_argument("kind", choices=["pca", "attention", "table"])
    s.add_argument("--in", dest="src", type=Path, required=True, help="trace directory (or results directory)")
    s.add_argument("--out", type=Path, required=True, help="output CSV")
    s.add_argument("--per-trial", action="store_true", help="fit PCA separately for every trial")
    s.add_argument("--plot", type=Path, help="also write a PNG of the first trace / projection")
    s = sub.add_parser("sweep-gamma", help="train one model per gamma and report validation loop gaps")
    s.add_argument("--gammas", type=float, nargs="+", default=[0.0, 0.01, 0.1, 1.0])
    s.add_argument("--attention", type=_on_off, default=True, metavar="{on,off}")
    s = sub.add_parser("reproduce-all", help="generate, train, evaluate all four models, analyze")
    s.add_argument("--jobs", type=int)
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.paper_scale:
        cfg = cfg.paper_scale()
    if args.seed is not None:
        cfg = cfg.override("seed", args.seed)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg = cfg.override(k, yaml.safe_load(v))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        root = args.run_dir or pl.default_output_root() / cfg.hash
        run = pl.RunDir(root, cfg)
        return _dispatch(args, run)
    except pl.DependencyError as e:
        print(f"error: {e} (run the upstream stage first)", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(args, run: pl.RunDir) -> int:
    cfg = run.cfg
    if args.cmd == "generate":
        pl.stage_generate(run)
        print(f"wrote {run.root / 'data'}")
    elif args.cmd == "train-ae":
        which = ("whole", "thumb") if args.which == "both" else (args.which,)
        for name, v in pl.stage_train_ae(run, which).items():
            print(f"ae_{name}: best validation MSE {v:.4g}")
    elif args.cmd == "train-policy":
        mid = pl.stage_train_policy(run, args.attention, args.constraint, args.gamma)
        print(f"wrote {run.root / 'models' / f'policy_{mid}.ckpt'}")
    elif args.cmd == "evaluate":
        res = pl.stage_evaluate(run, args.model, args.jobs)
        r = np.array([o.result for o in res])
        print(f"model {args.model}: {len(r)} trials, complete {np.sum(r == 2)}, partial-or-better {np.sum(r >= 1)}")
    elif args.cmd == "analyze":
        _analyze(args, run)
    elif args.cmd == "sweep-gamma":
        aes = pl.load_aes(run, thumb=args.attention)
        data = pl.load_data(run)
        for g in args.gammas:
            pol, feat, curve, lc = pl.train_model(cfg, data, aes, args.attention, g > 0, gamma=g)
            print(f"gamma={g:g}: best val loss {curve.best_val:.4g}, "
                  f"loop gap {pl.validation_loop_gap(pol, feat, data, lc.constraint_mode):.4g}")
    elif args.cmd == "reproduce-all":
        pl.stage_reproduce_all(run, args.jobs)
        print((run.root / "analysis" / "table.csv").read_text())
    return 0


def _analyze(args, run: pl.RunDir) -> None:
    from . import analysis
    if not args.src.exists():
        raise pl.DependencyError(f"missing input {args.src}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "pca":
        acc = pl.analyze_pca(args.src, args.out, args.per_trial, run.header)
        print(f"5-NN sub-task accuracy in 2-D projection: {acc:.3f}")
        if args.plot:
            H, L = pl.read_hidden_traces(args.src)
            m = analysis.pca_fit(H)
            analysis.plot_pca(np.concatenate([analysis.pca_project(m, h) for h in H]), np.concatenate(L), args.plot)
    elif args.kind == "attention":
        for k, v in pl.analyze_attention(args.src, args.out, run.header).items():
            print(f"{k}: {v:.4f}")
        if args.plot:
            A, L = pl.read_attention_traces(args.src)
            analysis.plot_attention(A[0], L[0], ["joints", "torques", "whole", "thumb"], args.plot)
    else:
        table = pl.analyze_table(args.src, args.out, run.header)
        for row in table.rows():
            print(",".join(map(str, row)))


if __name__ == "__main__":
    sys.exit(main())
