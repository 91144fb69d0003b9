"""Levenberg-Marquardt outer loop driving the Schur solve with PCG or MCG."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .camera import DegenerateObservationError, total_cost
from .mcg import HistoryOverflowError, McgConfig, solve_mcg
from .normal_equations import (
    NotPositiveDefiniteError,
    SingularBlockError,
    backsubstitute,
    block_jacobi,
    compute_schur,
    damp,
    linearize,
)
from .pcg import CgConfig, CgStats, SolverBreakdown, solve_pcg
from .problem_io import BAProblem

log = logging.getLogger(__name__)

LAMBDA_MIN = 1e-12
LAMBDA_MAX = 1e12

_STEP_FAILURES = (
    SolverBreakdown,
    SingularBlockError,
    NotPositiveDefiniteError,
    DegenerateObservationError,
    HistoryOverflowError,
)


@dataclass
class StateVector:
    cameras: np.ndarray  # (n_p, 9)
    points: np.ndarray  # (n_l, 3)

    @classmethod
    def from_problem(cls, problem: BAProblem) -> "StateVector":
        return cls(problem.cameras.copy(), problem.points.copy())

    @property
    def x_p(self) -> np.ndarray:
        return self.cameras.ravel()

    @property
    def x_l(self) -> np.ndarray:
        return self.points.ravel()

    def updated(self, dx_p: np.ndarray, dx_l: np.ndarray) -> "StateVector":
        return StateVector(
            self.cameras + dx_p.reshape(self.cameras.shape),
            self.points + dx_l.reshape(self.points.shape),
        )


@dataclass(frozen=True)
class LmConfig:
    lambda0: float = 1e-4
    max_iterations: int = 25
    function_tolerance: float = 1e-6
    # CgConfig selects PCG, McgConfig selects MCG
    inner: CgConfig | McgConfig = CgConfig()
    damping: str = "marquardt"
    max_consecutive_failures: int = 10

    def __post_init__(self):
        if not (self.lambda0 > 0 and self.function_tolerance > 0):
            raise ValueError("lambda0 and function_tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    @property
    def solver_kind(self) -> str:
        return "mcg" if isinstance(self.inner, McgConfig) else "pcg"


@dataclass
class LmIteration:
    iteration: int
    cost_before: float
    cost_after: float  # trial cost; nan when the step failed
    lam: float
    accepted: bool
    inner_iterations: int
    inner_converged: bool
    enlarged_steps: int
    solve_seconds: float
    cumulative_seconds: float


@dataclass
class LmTrace:
    initial_cost: float
    final_cost: float = float("nan")
    iterations: list[LmIteration] = field(default_factory=list)
    termination: str = ""
    total_seconds: float = 0.0

    @property
    def converged(self) -> bool:
        return self.termination in ("function_tolerance", "zero_cost")

    @property
    def solver_seconds(self) -> float:
        return sum(it.solve_seconds for it in self.iterations)

    @property
    def inner_iterations(self) -> int:
        return sum(it.inner_iterations for it in self.iterations)

    def cost_trace(self) -> np.ndarray:
        """Cost after each outer iteration (unchanged cost on rejected steps)."""
        out, cost = [], self.initial_cost
        for it in self.iterations:
            if it.accepted:
                cost = it.cost_after
            out.append(cost)
        return np.array(out)


def update_lambda(accepted: bool, lam: float) -> float:
    lam = lam / 3.0 if accepted else lam * 2.0
    return min(max(lam, LAMBDA_MIN), LAMBDA_MAX)


def solve_reduced_system(S, b_tilde, inner) -> tuple[np.ndarray, CgStats]:
    M = block_jacobi(S)
    if isinstance(inner, McgConfig):
        return solve_mcg(S, b_tilde, M, None, inner)
    return solve_pcg(S, b_tilde, M, None, inner)


def optimize(
    problem: BAProblem, initial_state: StateVector | None = None, cfg: LmConfig = LmConfig()
) -> tuple[StateVector, LmTrace]:
    """Minimize the reprojection cost.

    Each iteration linearizes (only after an accepted step), damps, forms the
    Schur system, solves it from x0 = 0, backsubstitutes and accepts the
    trial state iff the true cost drops.  Stops at ``max_iterations``, on a
    relative decrease below ``function_tolerance``, at zero cost, or after
    ``max_consecutive_failures`` rejected steps in a row.
    """
    t_start = time.perf_counter()
    inner = cfg.inner
    state = initial_state if initial_state is not None else StateVector.from_problem(problem)
    cost = total_cost(problem, state.cameras, state.points)
    trace = LmTrace(initial_cost=cost)
    lin = linearize(problem, state.cameras, state.points)
    lam = cfg.lambda0
    failures = 0

    for it in range(cfg.max_iterations):
        nb = damp(lin, lam, cfg.damping)
        trial_cost = float("nan")
        stats = CgStats()
        try:
            S, b_tilde = compute_schur(nb)
            dx_p, stats = solve_reduced_system(S, b_tilde, inner)
            dx_l = backsubstitute(nb, dx_p)
            trial = state.updated(dx_p, dx_l)
            trial_cost = total_cost(problem, trial.cameras, trial.points)
        except _STEP_FAILURES as exc:
            log.warning("LM iteration %d: step failed (%s)", it, exc)
        accepted = bool(trial_cost < cost)
        trace.iterations.append(
            LmIteration(
                it, cost, trial_cost, lam, accepted, stats.iterations, stats.converged,
                stats.enlarged_steps, stats.wall_time, time.perf_counter() - t_start,
            )
        )
        log.debug("iter %d cost %.6e -> %.6e lambda %.2e inner %d", it, cost, trial_cost, lam, stats.iterations)
        lam = update_lambda(accepted, lam)
        if accepted:
            rel = (cost - trial_cost) / cost
            state, cost = trial, trial_cost
            failures = 0
            if rel < cfg.function_tolerance:
                trace.termination = "function_tolerance"
                break
            lin = linearize(problem, state.cameras, state.points)
        else:
            if cost == 0.0:
                trace.termination = "zero_cost"
                break
            failures += 1
            if failures >= cfg.max_consecutive_failures:
                trace.termination = "too_many_failures"
                break
    else:
        trace.termination = "max_iterations"

    trace.final_cost = cost
    trace.total_seconds = time.perf_counter() - t_start
    return state, trace
