"""Block-Jacobi preconditioned conjugate gradients on the reduced camera system."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .normal_equations import BlockJacobiPreconditioner, SchurMatrix, spmv


class SolverBreakdown(ArithmeticError):
    """Non-positive curvature or a non-finite value inside a Krylov recurrence."""


@dataclass(frozen=True)
class CgConfig:
    epsilon: float = 1e-6
    imax: int = 1000

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.imax < 1:
            raise ValueError("imax must be >= 1")


@dataclass
class CgStats:
    iterations: int = 0
    residual_norm_history: list[float] = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0
    # per iteration: number of directions in P_i, and the tau-test value after it
    widths: list[int] = field(default_factory=list)
    tau_values: list[float] = field(default_factory=list)

    @property
    def enlarged_steps(self) -> int:
        return sum(1 for w in self.widths if w > 1)


@dataclass
class IterationInfo:
    """Snapshot handed to solver callbacks after the x/r update of iteration ``i``.

    ``P`` and ``Q`` are the (n, width) direction block and its image S P.
    """

    i: int
    x: np.ndarray
    r: np.ndarray
    P: np.ndarray
    Q: np.ndarray


Callback = Callable[[IterationInfo], None]

Preconditioner = Union[BlockJacobiPreconditioner, Callable[[np.ndarray], np.ndarray]]


def _apply(M: Preconditioner | None, r: np.ndarray) -> np.ndarray:
    return r.copy() if M is None else M(r)


def solve_pcg(
    S: SchurMatrix,
    b_tilde: np.ndarray,
    M: Preconditioner | None,
    x0: np.ndarray | None = None,
    cfg: CgConfig = CgConfig(),
    callback: Callback | None = None,
) -> tuple[np.ndarray, CgStats]:
    """Solve S x = -b_tilde.

    Stops when ||r||_2 < epsilon ||r_0||_2 or after ``imax`` iterations.
    ``M=None`` runs unpreconditioned CG.
    """
    t0 = time.perf_counter()
    b = np.asarray(b_tilde, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = -b - spmv(S, x)
    z = _apply(M, r)
    p = z
    r0 = float(np.linalg.norm(r))
    stats = CgStats(residual_norm_history=[r0])
    if r0 == 0.0:
        stats.converged = True
        stats.wall_time = time.perf_counter() - t0
        return x, stats

    for i in range(cfg.imax):
        q = spmv(S, p)
        delta = float(q @ p)
        gamma = float(p @ r)
        if not (delta > 0.0 and np.isfinite(delta) and np.isfinite(gamma)):
            raise SolverBreakdown(f"PCG breakdown at iteration {i}: p^T S p = {delta}")
        alpha = gamma / delta
        x = x + alpha * p
        r = r - alpha * q
        rn = float(np.linalg.norm(r))
        if not np.isfinite(rn):
            raise SolverBreakdown(f"non-finite residual at iteration {i}")
        stats.iterations = i + 1
        stats.residual_norm_history.append(rn)
        stats.widths.append(1)
        if callback is not None:
            callback(IterationInfo(i, x, r, p[:, None], q[:, None]))
        if rn < cfg.epsilon * r0:
            stats.converged = True
            break
        z = _apply(M, r)
        beta = float(q @ z) / delta
        p = z - beta * p

    stats.wall_time = time.perf_counter() - t0
    return x, stats
