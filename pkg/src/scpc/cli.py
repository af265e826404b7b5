"""Command-line entry point.

Exit status: 0 success, 1 invalid configuration, 2 runtime failure,
3 failed acceptance check (gradient suite).
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import gradcheck
from .config import ConfigError, resolve
from .pipeline import PIPELINE_STAGES, Run, StageError, cmd_ablate, run_stages
from .selfsim import TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

STAGE_COMMANDS = {
    "gen": ["gen"],
    "train-sim": ["train-sim"],
    "mine": ["mine"],
    "train-con": ["train-con"],
    "probe": ["probe"],
    "seg-probe": ["seg-probe"],
    "sweep": ["sweep"],
    "pipeline": PIPELINE_STAGES,
}

HELP = {
    "gen": "write train/test point clouds and the dataset manifest",
    "train-sim": "train the patch self-similarity model",
    "mine": "export hard-negative tables at the thresholds of mine_epoch",
    "train-con": "train the contrastive encoder",
    "probe": "linear classification probe on frozen global features",
    "seg-probe": "point-wise segmentation head on frozen features",
    "sweep": "noise, density or label-fraction sweep",
    "ablate": "interval mining versus all negatives, two full runs",
    "gradcheck": "finite-difference gradient suite",
    "pipeline": "gen, train-sim, mine, train-con, probe, seg-probe, sweep",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scpc", description="Self-contrastive point-cloud pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*STAGE_COMMANDS, "ablate"]:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="key=value config file ('#' comments allowed)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config entry (repeatable)")
        if name in ("train-sim", "train-con", "pipeline"):
            p.add_argument("--stop-after", type=int, default=None, metavar="N",
                           help="stop after N epochs of a training stage (resume by rerunning)")
    g = sub.add_parser("gradcheck", help=HELP["gradcheck"])
    g.add_argument("--points", type=int, default=gradcheck.POINTS, help="random points per check")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--only", nargs="*", metavar="CHECK", help="run a subset of checks")
    return parser


def _gradcheck(args) -> int:
    names = args.only or None
    if names:
        unknown = sorted(set(names) - set(gradcheck.CHECKS))
        if unknown:
            print(f"error: unknown checks {unknown}", file=sys.stderr)
            return EXIT_CONFIG
    results = gradcheck.run_suite(names, points=args.points, seed=args.seed)
    print("\n".join(gradcheck.report(results)))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        logging.getLogger("scpc").addHandler(handler)
        logging.getLogger("scpc").setLevel(logging.INFO)
    if args.command == "gradcheck":
        return _gradcheck(args)
    try:
        config = resolve(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "stop_after", None) is not None and args.stop_after < 1:
        print("config error: --stop-after must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with Run(config) as run:
            if args.command == "ablate":
                a, b, delta = cmd_ablate(run)
                print(f"interval {a:.4f}  all {b:.4f}  delta {delta:.4f}")
            else:
                results = run_stages(run, STAGE_COMMANDS[args.command], getattr(args, "stop_after", None))
                for stage, metrics in results.items():
                    if isinstance(metrics, dict):
                        print(stage, " ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
                    else:
                        for split, value in metrics:
                            print(f"{stage} {split} {value:.4f}")
            print(f"run directory {run.dir} (config hash {run.hash})")
    except (StageError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
