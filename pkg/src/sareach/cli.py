"""Command line entry point: ``sareach <stage> --scenario FILE --out DIR``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_CONTAINMENT = 0, 2, 3, 4

COMMANDS = ("pipeline", "fit", "tube", "errbound", "solve", "dp", "compare", "rollout", "contours")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sareach", description="Lifted Hopf reachability with a DP oracle.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help="run every stage" if name == "pipeline" else f"run the {name} stage")
        p.add_argument("--scenario", required=True, help="scenario YAML file or bundled scenario name")
        p.add_argument("--out", help="output directory (default: the scenario's output or out/<name>)")
        p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")
        p.add_argument("--strict", action="store_true",
                       help="exit 4 on containment violations or when the error bound is ablated")
    sub.add_parser("list", help="list bundled scenarios")
    return ap


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise SystemExit("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


def _resolve(name_or_path: str):
    from .pipeline import bundled_scenarios, load_scenario

    p = Path(name_or_path)
    if not p.exists():
        known = bundled_scenarios()
        if name_or_path in known:
            p = known[name_or_path]
    return load_scenario(p)


def _strict_failure(report) -> str:
    if report.ablation:
        return "error bound was forced to zero (ablation); refusing to certify"
    if report.violations:
        return f"{report.violations} containment violation(s)"
    return ""


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        from .pipeline import bundled_scenarios

        for name, path in bundled_scenarios().items():
            print(f"{name}\t{path}")
        return EXIT_OK
    _set_threads(args.threads)
    from . import errors
    from .pipeline import ContainmentReport, StageError, Workspace, run_pipeline, run_stage

    validation = (errors.ScenarioError, errors.InvalidArgumentError, errors.InvalidTargetError,
                  errors.NotFoundError, errors.OutOfDomainError)
    numerical = (errors.NumericalError, errors.BlowUpError, errors.DivergenceError, errors.EvaluationError,
                 errors.SingularFitError, FloatingPointError)
    stage = "scenario"
    try:
        scn = _resolve(args.scenario)
        if args.seed is not None:
            if args.seed < 0:
                raise errors.ScenarioError("--seed must be nonnegative")
            scn = scn.with_seed(args.seed)
        out = Path(args.out or scn.output or Path("out") / scn.name)
        if args.command == "pipeline":
            summary = run_pipeline(scn, out, args.force, log=lambda s: print(s, file=sys.stderr))
            report = ContainmentReport(summary["containment"]["horizons"], scn.sense, scn.ablation)
            print(json.dumps(summary["containment"], indent=1))
        else:
            stage = args.command
            res = run_stage(stage, scn, Workspace(out, args.force))
            report = res if isinstance(res, ContainmentReport) else None
            if report is not None:
                print(json.dumps(report.to_dict(), indent=1))
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if isinstance(exc.cause, numerical) else EXIT_VALIDATION
    except validation as exc:
        print(f"error in stage {stage!r}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except numerical as exc:
        print(f"error in stage {stage!r}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if args.strict and report is not None:
        why = _strict_failure(report)
        if why:
            print(f"strict: {why}", file=sys.stderr)
            return EXIT_CONTAINMENT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
