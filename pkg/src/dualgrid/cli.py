"""Command-line interface: run scenarios and compare run directories."""

import argparse
import sys

from .compare import compare_runs
from .errors import ConfigurationError, ScenarioError
from .runner import run


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dualgrid",
        description="Rank-parallel dual-grid CFD-DEM coupling sandbox",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario file")
    p_run.add_argument("scenario", help="path to a scenario JSON file")
    p_run.add_argument("--ranks", type=int, default=1, help="logical rank count")
    p_run.add_argument("--backend", choices=["deterministic", "threads"],
                       default="deterministic")
    p_run.add_argument("--strategy", choices=["gather-scatter", "distributed"],
                       default=None, help="override the scenario's exchange strategy")
    p_run.add_argument("--mode", choices=["multiscale", "monoscale"], default=None,
                       help="override the scenario's coupling mode")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--steps", type=int, default=None,
                       help="override the number of coupling steps")
    p_run.add_argument("--force", action="store_true",
                       help="overwrite a non-empty output directory")
    p_run.add_argument("--timeout", type=float, default=120.0,
                       help="blocking-wait timeout for the threads backend [s]")

    p_cmp = sub.add_parser("compare", help="compare two run directories")
    p_cmp.add_argument("dir_a")
    p_cmp.add_argument("dir_b")
    p_cmp.add_argument("--tol", type=float, default=0.0,
                       help="max allowed absolute difference (0 = bitwise)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "run":
        try:
            result = run(args.scenario, ranks=args.ranks, backend=args.backend,
                         strategy=args.strategy, mode=args.mode, out_dir=args.out,
                         steps=args.steps, force=args.force, timeout=args.timeout)
        except (ScenarioError, ConfigurationError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"run complete: {result.out_dir} "
              f"(steps={result.manifest['steps']}, ranks={result.manifest['ranks']})")
        return 0
    if args.command == "compare":
        try:
            report = compare_runs(args.dir_a, args.dir_b, tolerance=args.tol)
        except (ValueError, FileNotFoundError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(report.render())
        return 0 if report.ok else 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
