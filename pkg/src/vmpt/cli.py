"""Command line entry point: ``vmpt {solve,sweep,verify-trace,export-fields}``."""
import argparse
import dataclasses
import logging
import os
import sys

from .core import SolverTrace, verify_trace
from .experiments import (ConfigError, ExperimentSpec, RunSpec, load_config, report_table,
                          run_experiment)
from .io import read_nodal_csv, write_nodal_csv, write_vtk
from .metrics import KINDS
from .phasefield import PhaseFieldProblem, ProblemParams

FLAG_FIELDS = {"metric": "metric", "h": "h", "eps": "epsilon", "gamma": "gamma", "tol": "tol",
               "seed": "seed", "init": "init", "k_max": "k_max"}


def _add_run_flags(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--metric", choices=KINDS)
    p.add_argument("--h", type=float, help="mesh size, e.g. 0.03125")
    p.add_argument("--eps", type=float, help="interface parameter epsilon")
    p.add_argument("--gamma", type=float, help="perimeter weight gamma")
    p.add_argument("--tol", type=float, help="stopping tolerance")
    p.add_argument("--seed", type=int)
    p.add_argument("--init", choices=("uniform", "random"))
    p.add_argument("--k-max", dest="k_max", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--strict-invariants", action="store_true",
                   help="abort on the first invariant violation")


def _overrides(args):
    return {field: getattr(args, flag) for flag, field in FLAG_FIELDS.items()
            if getattr(args, flag) is not None}


def _spec_from_args(args, table):
    spec = load_config(args.config) if args.config else ExperimentSpec(runs=[RunSpec()], table=table)
    over = _overrides(args)
    spec.runs = [dataclasses.replace(r, **over) for r in spec.runs]
    if args.out:
        spec.out_dir = args.out
    return spec.validate()


def cmd_solve(args):
    spec = _spec_from_args(args, "single")
    if not spec.runs:
        raise ConfigError("config has no runs")
    spec.runs = spec.runs[:1]
    spec.table = "single"
    rows = run_experiment(spec, strict=args.strict_invariants)
    print(report_table(rows), end="")
    return 0 if not rows[0]["terminate_reason"].startswith("error") else 1


def cmd_sweep(args):
    spec = _spec_from_args(args, "mesh_sweep")
    rows = run_experiment(spec, strict=args.strict_invariants)
    print(report_table(rows), end="")
    return 0


def cmd_verify(args):
    trace = SolverTrace.from_csv(args.trace)
    if args.lambda_min is not None:
        trace.lambda_min, trace.lambda_max = args.lambda_min, args.lambda_max
    if args.c1 is not None:
        trace.c1 = args.c1
    if args.sigma is not None:
        trace.sigma = args.sigma
    issues = verify_trace(trace)
    for msg in issues:
        print(msg)
    print(f"{len(trace.rows)} rows, {len(issues)} violations")
    return 1 if issues else 0


def cmd_export(args):
    mesh, c, _ = read_nodal_csv(args.fields)
    params = ProblemParams(epsilon=args.eps or 0.04, gamma=args.gamma or 0.5, m=(args.m1, 1 - args.m1))
    problem = PhaseFieldProblem(mesh, params)
    st = problem.state(c - problem.m1)
    out = args.out or os.path.dirname(os.path.abspath(args.fields))
    os.makedirs(out, exist_ok=True)
    write_vtk(os.path.join(out, "final.vtk"), mesh, c, st.u)
    write_nodal_csv(os.path.join(out, "final.csv"), mesh, c, st.u)
    print(f"compliance {st.compliance!r}  gl_energy {problem.gl_energy(c - problem.m1)!r}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="vmpt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="single cantilever solve")
    _add_run_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="all runs of a config; flags override every run")
    _add_run_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-trace", help="check a trace.csv against the solver invariants")
    p.add_argument("trace")
    p.add_argument("--lambda-min", type=float)
    p.add_argument("--lambda-max", type=float)
    p.add_argument("--c1", type=float, help="coercivity constant for the descent check")
    p.add_argument("--sigma", type=float, help="Armijo fraction")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-fields", help="recompute the state for a final.csv and rewrite VTK/CSV")
    p.add_argument("fields")
    p.add_argument("--eps", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--m1", type=float, default=0.5, help="hard-phase volume fraction")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "lambda_min", None) is not None and args.lambda_max is None:
        print("--lambda-min needs --lambda-max", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
