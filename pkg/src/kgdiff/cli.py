"""Command-line pipeline driver.

Every subcommand reads one declarative config file, optionally overridden by
--seed/--out/--workers, and writes its artifacts plus a manifest into the run
directory. Metric lines go to stdout as `key=value`; diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import RunConfig, load_config

COMMANDS = (
    "gen-kg", "simulate", "profile", "train", "sample", "evaluate", "sweep",
    "validate-config",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgdiff",
        description="Knowledge-guided diffusion pipeline for synthetic event trajectories",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the run config file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default=None, help="override [run] out directory")
        p.add_argument("--workers", type=int, default=None, help="override [run] workers")
    return parser


def _load(args) -> tuple[RunConfig, list[str]]:
    cfg, problems = load_config(args.config)
    run = cfg.run
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.out is not None:
        run = replace(run, out=args.out)
    if args.workers is not None:
        run = replace(run, workers=args.workers)
    return replace(cfg, run=run), problems


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, problems = _load(args)
    except OSError as exc:
        print(f"error command={args.command} reason=config-unreadable detail={exc}", file=sys.stderr)
        return 2

    if args.command == "validate-config":
        if problems:
            for item in problems:
                print(f"config-error: {item}", file=sys.stderr)
            print(f"error command=validate-config violations={len(problems)}", file=sys.stderr)
            return 2
        print("ok")
        return 0

    if problems:
        for item in problems:
            print(f"config-error: {item}", file=sys.stderr)
        print(f"error command={args.command} reason=invalid-config violations={len(problems)}", file=sys.stderr)
        return 2

    run_dir = Path(cfg.run.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "gen-kg":
            stats = pipeline.stage_gen_kg(cfg, run_dir)
            print(f"nodes={stats['n_nodes']} edges={stats['n_edges']}")
        elif args.command == "simulate":
            info = pipeline.stage_simulate(cfg, run_dir)
            tr, va, te = info["splits"]
            print(f"patients={info['n_patients']} train={tr} valid={va} test={te}")
        elif args.command == "profile":
            profile = pipeline.stage_profile(cfg, run_dir)
            print(
                f"anchor={profile.anchor} lambda={profile.lam} d={profile.d} "
                f"psi_nonzero={int((profile.psi_raw > 0).sum())}"
            )
        elif args.command == "train":
            result = pipeline.stage_train(cfg, run_dir, log_stdout=True)
            final_loss = result.trace[-1][1] if result.trace else float("nan")
            print(f"steps={result.opt['step']} final_loss={final_loss:.6f}")
        elif args.command == "sample":
            trajectories = pipeline.stage_sample(cfg, run_dir)
            print(f"trajectories={len(trajectories)}")
        elif args.command == "evaluate":
            report = pipeline.stage_evaluate(cfg, run_dir)
            print(
                f"cat_mmd2={report.cat_mmd2:.6f} cont_mmd2={report.cont_mmd2:.6f} "
                f"delta_bal_acc={report.delta_bal_acc:.4f} "
                f"mia_domias={report.mia['domias']:.4f} mia_shadow={report.mia['shadow']:.4f}"
            )
        elif args.command == "sweep":
            result = pipeline.lambda_sweep(cfg, run_dir, workers=cfg.run.workers)
            print(result.summary_table())
            print(f"spearman_rho={result.spearman_lambda_catmmd:+.4f}")
    except pipeline.MissingArtifactError as exc:
        print(
            f"error command={args.command} reason=missing-artifact "
            f"artifact={exc.artifact} hint={exc.producer}",
            file=sys.stderr,
        )
        return 1
    except Exception as exc:  # single-line machine-parseable failure contract
        print(
            f"error command={args.command} reason={type(exc).__name__} detail={exc}",
            file=sys.stderr,
        )
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
