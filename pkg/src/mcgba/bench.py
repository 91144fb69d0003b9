"""Head-to-head PCG/MCG runs, parameter sweeps and their CSV output."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .lm import LmConfig, LmTrace, optimize
from .mcg import McgConfig
from .normal_equations import coobservation_pattern
from .pcg import CgConfig
from .problem_io import BAProblem, generate_synthetic, parse_synth_spec  # noqa: F401

TRACE_COLUMNS = ("iter", "cost", "lambda", "inner_iters", "solve_seconds", "cumulative_seconds")


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def write_csv(path: Path | None, header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def default_subsets(n_p: int) -> int:
    # about ten poses per subset, the typical ratio in published BAL runs
    return max(1, min(n_p, round(n_p / 10)))


@dataclass
class RunReport:
    problem: str
    solver: str
    N: int | None
    tau: float | None
    t_solver: float
    t_total: float
    solver_runtime_ratio: float | None
    global_runtime_ratio: float | None
    density: float
    outer_iterations: int
    inner_iterations: int
    final_cost: float
    termination: str
    threads: int

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]


def problem_density(problem: BAProblem) -> float:
    """Schur block density from the co-observation pattern alone."""
    G = coobservation_pattern(problem)
    return G.nnz / float(problem.n_cameras**2)


def trace_rows(trace: LmTrace, timings: bool = True):
    costs = trace.cost_trace()
    for it, cost in zip(trace.iterations, costs):
        yield [
            it.iteration, cost, it.lam, it.inner_iterations,
            it.solve_seconds if timings else None,
            it.cumulative_seconds if timings else None,
        ]


def lm_config(
    solver: str,
    tau: float,
    n_subsets: int,
    cg_tol: float = 1e-6,
    cg_max_iters: int = 1000,
    lm_max_iters: int = 25,
    lm_tol: float = 1e-6,
    lambda0: float = 1e-4,
    damping: str = "marquardt",
) -> LmConfig:
    if solver == "pcg":
        inner = CgConfig(cg_tol, cg_max_iters)
    elif solver == "mcg":
        inner = McgConfig(tau, n_subsets, cg_tol, cg_max_iters)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return LmConfig(lambda0, lm_max_iters, lm_tol, inner, damping)


def run_single(problem: BAProblem, cfg: LmConfig, threads: int = 4, density: float | None = None):
    _, trace = optimize(problem, cfg=cfg)
    inner = cfg.inner
    mcg = isinstance(inner, McgConfig)
    report = RunReport(
        problem=problem.name,
        solver=cfg.solver_kind,
        N=inner.n_subsets if mcg else None,
        tau=inner.tau if mcg else None,
        t_solver=trace.solver_seconds,
        t_total=trace.total_seconds,
        solver_runtime_ratio=None,
        global_runtime_ratio=None,
        density=problem_density(problem) if density is None else density,
        outer_iterations=len(trace.iterations),
        inner_iterations=trace.inner_iterations,
        final_cost=trace.final_cost,
        termination=trace.termination,
        threads=threads,
    )
    return trace, report


def max_cost_divergence(a: LmTrace, b: LmTrace) -> float:
    """Largest relative gap between per-iteration cost traces (common prefix)."""
    ca, cb = a.cost_trace(), b.cost_trace()
    n = min(ca.size, cb.size)
    if n == 0:
        return 0.0
    ref = np.maximum(np.abs(ca[:n]), np.finfo(float).tiny)
    return float(np.max(np.abs(ca[:n] - cb[:n]) / ref))


@dataclass
class Comparison:
    pcg: LmTrace
    mcg: LmTrace
    pcg_report: RunReport
    mcg_report: RunReport
    max_cost_divergence: float

    @property
    def iteration_ratio(self) -> float:
        return self.mcg.inner_iterations / max(self.pcg.inner_iterations, 1)

    @property
    def solver_runtime_ratio(self) -> float:
        return self.mcg.solver_seconds / self.pcg.solver_seconds

    @property
    def global_runtime_ratio(self) -> float:
        return self.mcg.total_seconds / self.pcg.total_seconds

    COLUMNS = (
        "problem", "N", "tau", "density", "inner_pcg", "inner_mcg", "iteration_ratio",
        "t_pcg", "t_mcg", "solver_runtime_ratio", "global_runtime_ratio",
        "outer_pcg", "outer_mcg", "max_cost_divergence", "threads",
    )

    def row(self, timings: bool = True) -> list:
        r = self.mcg_report
        t = (lambda v: v if timings else None)
        return [
            r.problem, r.N, r.tau, r.density, self.pcg.inner_iterations, self.mcg.inner_iterations,
            self.iteration_ratio, t(self.pcg.solver_seconds), t(self.mcg.solver_seconds),
            t(self.solver_runtime_ratio), t(self.global_runtime_ratio),
            len(self.pcg.iterations), len(self.mcg.iterations), self.max_cost_divergence, r.threads,
        ]


def compare(
    problem: BAProblem,
    pcg_cfg: LmConfig,
    mcg_cfg: LmConfig,
    threads: int = 4,
    baseline: tuple[LmTrace, RunReport] | None = None,
) -> Comparison:
    """Run PCG- and MCG-driven LM from the same start with the same LM settings."""
    density = problem_density(problem)
    tp, rp = baseline if baseline is not None else run_single(problem, pcg_cfg, threads, density)
    tm, rm = run_single(problem, mcg_cfg, threads, density)
    rm.solver_runtime_ratio = tm.solver_seconds / tp.solver_seconds if tp.solver_seconds else None
    rm.global_runtime_ratio = tm.total_seconds / tp.total_seconds if tp.total_seconds else None
    return Comparison(tp, tm, rp, rm, max_cost_divergence(tp, tm))


SWEEP_COLUMNS = ("sweep", "value", "seed") + Comparison.COLUMNS


def sweep(
    source: str | BAProblem,
    kind: str,
    grid: list[float],
    base: dict,
    seeds: list[int] | None = None,
    threads: int = 4,
    load=None,
):
    """Yield (value, seed, Comparison) for each grid point.

    ``tau`` and ``subsets`` sweeps vary the MCG setting on one problem and
    share one PCG baseline; ``density`` needs a ``synth:`` source and
    regenerates the problem per grid value and seed.
    """
    if kind not in ("tau", "subsets", "density"):
        raise ValueError(f"unknown sweep {kind!r}")
    if kind == "density":
        if not (isinstance(source, str) and source.startswith("synth:")):
            raise ValueError("density sweeps need a synth: input")
        synth = parse_synth_spec(source)
        for seed in seeds if seeds else [synth.rng_seed]:
            for value in grid:
                cfg = replace(synth, target_density=float(value), rng_seed=int(seed))
                problem = generate_synthetic(cfg)
                n_sub = base.get("n_subsets") or default_subsets(problem.n_cameras)
                kw = {**base, "n_subsets": n_sub}
                yield value, seed, compare(problem, lm_config("pcg", **kw), lm_config("mcg", **kw), threads)
        return

    problem = source if isinstance(source, BAProblem) else load(source)
    seed = None
    kw = {**base}
    kw["n_subsets"] = kw.get("n_subsets") or default_subsets(problem.n_cameras)
    density = problem_density(problem)
    baseline = run_single(problem, lm_config("pcg", **kw), threads, density)
    for value in grid:
        if kind == "tau":
            point = {**kw, "tau": float(value)}
        else:
            point = {**kw, "n_subsets": int(value)}
        yield value, seed, compare(problem, None, lm_config("mcg", **point), threads, baseline)
