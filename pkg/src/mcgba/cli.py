"""Command line: ``mcgba run|compare|sweep``.

Exit codes: 0 converged, 1 LM iteration budget exhausted, 2 unreadable
input, 3 solver breakdown (LM gave up after repeated failed steps).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import bench
from .lm import LmTrace
from .problem_io import BalFormatError, InfeasibleDensityError, InvalidProblemError, load_problem

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_BAD_INPUT, EXIT_BREAKDOWN = 0, 1, 2, 3

log = logging.getLogger("mcgba")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="BAL file (.txt or .bz2) or synth:np=..,nl=..,density=..,seed=..")
    p.add_argument("--tau", type=float, default=6.0, help="tau-test threshold for MCG")
    p.add_argument("--num-subsets", type=int, default=None, help="MCG pose subsets (default: n_p/10)")
    p.add_argument("--cg-tol", type=float, default=1e-6)
    p.add_argument("--cg-max-iters", type=int, default=1000)
    p.add_argument("--lm-max-iters", type=int, default=25)
    p.add_argument("--lm-tol", type=float, default=1e-6)
    p.add_argument("--lambda0", type=float, default=1e-4)
    p.add_argument("--damping", choices=("marquardt", "identity"), default="marquardt")
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--out-dir", type=Path, default=Path("."))
    p.add_argument(
        "--no-timings", action="store_true",
        help="leave wall-clock columns empty so CSV output is byte-reproducible",
    )
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcgba", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="optimize one problem with one inner solver")
    _common(run)
    run.add_argument("--solver", choices=("pcg", "mcg"), default="pcg")

    cmp_ = sub.add_parser("compare", help="PCG vs MCG on the same problem")
    _common(cmp_)

    sw = sub.add_parser("sweep", help="compare over a grid of tau, N or density")
    _common(sw)
    sw.add_argument("--sweep", choices=("tau", "subsets", "density"), required=True)
    sw.add_argument("--grid", required=True, help="comma separated values")
    sw.add_argument("--seeds", default=None, help="comma separated seeds (density sweeps)")
    return parser


def _base_kwargs(args) -> dict:
    return dict(
        tau=args.tau,
        n_subsets=args.num_subsets,
        cg_tol=args.cg_tol,
        cg_max_iters=args.cg_max_iters,
        lm_max_iters=args.lm_max_iters,
        lm_tol=args.lm_tol,
        lambda0=args.lambda0,
        damping=args.damping,
    )


def _exit_code(*traces: LmTrace) -> int:
    if any(t.termination == "too_many_failures" for t in traces):
        return EXIT_BREAKDOWN
    if all(t.converged for t in traces):
        return EXIT_OK
    return EXIT_NOT_CONVERGED


def _report_rows(reports, timings: bool):
    for r in reports:
        row = r.row()
        if not timings:
            for name in ("t_solver", "t_total", "solver_runtime_ratio", "global_runtime_ratio"):
                row[bench.RunReport.header().index(name)] = None
        yield row


class InputError(Exception):
    pass


def _load(source: str):
    try:
        return load_problem(source)
    except (BalFormatError, InvalidProblemError, InfeasibleDensityError, OSError, ValueError) as exc:
        raise InputError(f"{source}: {exc}") from exc


def cmd_run(args) -> int:
    problem = _load(args.input)
    kw = _base_kwargs(args)
    kw["n_subsets"] = kw["n_subsets"] or bench.default_subsets(problem.n_cameras)
    trace, report = bench.run_single(problem, bench.lm_config(args.solver, **kw), args.threads)
    timings = not args.no_timings
    bench.write_csv(args.out_dir / "trace.csv", bench.TRACE_COLUMNS, bench.trace_rows(trace, timings))
    bench.write_csv(args.out_dir / "report.csv", bench.RunReport.header(), _report_rows([report], timings))
    print(
        f"{report.problem}: {report.solver} cost {trace.initial_cost:.6e} -> {trace.final_cost:.6e}, "
        f"{report.outer_iterations} LM / {report.inner_iterations} inner iterations, "
        f"solver {report.t_solver:.3f}s, total {report.t_total:.3f}s ({trace.termination})"
    )
    return _exit_code(trace)


def cmd_compare(args) -> int:
    problem = _load(args.input)
    kw = _base_kwargs(args)
    kw["n_subsets"] = kw["n_subsets"] or bench.default_subsets(problem.n_cameras)
    c = bench.compare(problem, bench.lm_config("pcg", **kw), bench.lm_config("mcg", **kw), args.threads)
    timings = not args.no_timings
    bench.write_csv(args.out_dir / "trace_pcg.csv", bench.TRACE_COLUMNS, bench.trace_rows(c.pcg, timings))
    bench.write_csv(args.out_dir / "trace_mcg.csv", bench.TRACE_COLUMNS, bench.trace_rows(c.mcg, timings))
    bench.write_csv(
        args.out_dir / "report.csv", bench.RunReport.header(),
        _report_rows([c.pcg_report, c.mcg_report], timings),
    )
    bench.write_csv(args.out_dir / "compare.csv", bench.Comparison.COLUMNS, [c.row(timings)])
    print(
        f"{problem.name}: d={c.mcg_report.density:.3f} N={c.mcg_report.N} tau={c.mcg_report.tau:g} | "
        f"inner iterations PCG {c.pcg.inner_iterations} MCG {c.mcg.inner_iterations} "
        f"(ratio {c.iteration_ratio:.3f}) | solver runtime ratio {c.solver_runtime_ratio:.3f}, "
        f"global {c.global_runtime_ratio:.3f} | max cost divergence {c.max_cost_divergence:.2e}"
    )
    return _exit_code(c.pcg, c.mcg)


def cmd_sweep(args) -> int:
    try:
        grid = [float(v) for v in args.grid.split(",") if v.strip()]
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    except ValueError as exc:
        raise InputError(f"bad grid or seeds: {exc}") from exc
    if args.sweep == "density":
        try:
            bench.parse_synth_spec(args.input)
        except ValueError as exc:
            raise InputError(f"density sweeps need a synth: input ({exc})") from exc
    timings = not args.no_timings
    rows, traces = [], []
    for value, seed, c in bench.sweep(
        args.input, args.sweep, grid, _base_kwargs(args), seeds, args.threads, load=_load
    ):
        value_out = int(value) if args.sweep == "subsets" else value
        rows.append([args.sweep, value_out, seed] + c.row(timings))
        traces += [c.pcg, c.mcg]
        print(
            f"{args.sweep}={value_out:g} seed={seed}: iteration ratio {c.iteration_ratio:.3f}, "
            f"solver runtime ratio {c.solver_runtime_ratio:.3f}"
        )
    bench.write_csv(args.out_dir / "sweep.csv", bench.SWEEP_COLUMNS, rows)
    return _exit_code(*traces)


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args.out_dir.mkdir(parents=True, exist_ok=True)
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
