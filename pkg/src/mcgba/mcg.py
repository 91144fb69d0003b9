"""Multidirectional conjugate gradients (MCG) on the reduced camera system.

MCG runs plain block-Jacobi PCG steps while they make good progress.  When
the tau-test says a step reduced the error too little, the next search
direction is replaced by N directions, one per pose subset: the global
preconditioned residual split along the partition.  Directions become
(n, width) blocks, step lengths come from pseudo-inverted width x width
Gram matrices, and every new block is S-orthogonalized against the whole
history.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .normal_equations import SchurMatrix, spmm_structured, spmv
from .pcg import Callback, CgStats, IterationInfo, Preconditioner, SolverBreakdown, _apply
from .problem_io import CAMERA_DIM


class HistoryOverflowError(MemoryError):
    pass


@dataclass(frozen=True)
class Partition:
    subset_of: np.ndarray  # pose -> subset
    sizes: tuple[int, ...]
    block_dim: int = CAMERA_DIM

    @property
    def n_subsets(self) -> int:
        return len(self.sizes)

    @property
    def n_poses(self) -> int:
        return self.subset_of.size

    @cached_property
    def row_subset(self) -> np.ndarray:
        return np.repeat(self.subset_of, self.block_dim)


def make_partition(n_p: int, n_subsets: int, block_dim: int = CAMERA_DIM) -> Partition:
    """Contiguous pose ranges: N-1 subsets of floor(n_p/N) poses, the last takes the rest."""
    if not 1 <= n_subsets <= n_p:
        raise ValueError(f"need 1 <= N <= n_p, got N={n_subsets}, n_p={n_p}")
    if n_subsets == 1:
        sizes = (n_p,)
    else:
        size = n_p // n_subsets
        sizes = (size,) * (n_subsets - 1) + (n_p - size * (n_subsets - 1),)
    subset_of = np.repeat(np.arange(n_subsets), sizes)
    return Partition(subset_of, sizes, block_dim)


@dataclass(frozen=True)
class McgConfig:
    tau: float
    partition: Partition | int  # an int N is expanded by make_partition at solve time
    epsilon: float = 1e-6
    imax: int = 1000
    rank_tol: float | None = None  # default 1e-12 * N
    max_history_columns: int | None = None  # default imax * N

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError("tau must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.imax < 1:
            raise ValueError("imax must be >= 1")

    @property
    def n_subsets(self) -> int:
        p = self.partition
        return p.n_subsets if isinstance(p, Partition) else int(p)

    @property
    def effective_rank_tol(self) -> float:
        return 1e-12 * self.n_subsets if self.rank_tol is None else self.rank_tol

    @property
    def history_cap(self) -> int:
        if self.max_history_columns is not None:
            return self.max_history_columns
        return self.imax * self.n_subsets


def _pinv_sym(delta: np.ndarray, rank_tol: float) -> tuple[np.ndarray, np.ndarray]:
    if delta.shape == (1, 1):
        d = delta[0, 0]
        return (np.array([[1.0 / d]]) if d != 0 else np.zeros((1, 1))), np.array([d])
    sym = 0.5 * (delta + delta.T)
    w, V = np.linalg.eigh(sym)
    top = np.abs(w).max() if w.size else 0.0
    keep = np.abs(w) > rank_tol * top
    if not keep.any():
        return np.zeros_like(sym), w
    Vk = V[:, keep]
    return (Vk / w[keep]) @ Vk.T, w


def pseudo_inverse(delta: np.ndarray, rank_tol: float = 1e-12) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric matrix via eigendecomposition.

    Eigenvalues with |lambda| <= rank_tol * max|lambda| are treated as zero.
    """
    return _pinv_sym(np.atleast_2d(np.asarray(delta, dtype=np.float64)), rank_tol)[0]


TAU_DENOM_FLOOR = 1e-30


def tau_test(
    gamma: np.ndarray, alpha: np.ndarray, r_next: np.ndarray, M: Preconditioner | None
) -> tuple[float, np.ndarray]:
    """Return (t, M^-1 r_next) with t = gamma^T alpha / (r_next^T M^-1 r_next).

    A denominator below 1e-30 means the residual is gone; t is then +inf so
    the caller never enlarges.
    """
    z = _apply(M, r_next)
    denom = float(r_next @ z)
    if denom < TAU_DENOM_FLOOR:
        return float("inf"), z
    num = float(np.dot(np.ravel(gamma), np.ravel(alpha)))
    return num / denom, z


def expand_residual(z: np.ndarray, partition: Partition) -> np.ndarray:
    """Split a preconditioned residual into N disjoint columns, one per pose subset."""
    n = z.size
    Z = np.zeros((n, partition.n_subsets))
    Z[np.arange(n), partition.row_subset] = z
    return Z


class _History:
    """Column store for P_j, Q_j and Q_j pinv(Delta_j), grown by doubling."""

    def __init__(self, n: int, cap: int):
        self.n = n
        self.cap = cap
        self.cols = 0
        self._alloc = 0
        self.P = self.Q = self.QD = np.empty((n, 0))
        self.widths: list[int] = []

    def append(self, P: np.ndarray, Q: np.ndarray, QD: np.ndarray) -> None:
        w = P.shape[1]
        if self.cols + w > self.cap:
            raise HistoryOverflowError(
                f"direction history would hold {self.cols + w} columns, cap is {self.cap}"
            )
        if self.cols + w > self._alloc:
            new = min(self.cap, max(2 * self._alloc, self.cols + w, 16))
            for name in ("P", "Q", "QD"):
                buf = np.empty((self.n, new))
                buf[:, : self.cols] = getattr(self, name)[:, : self.cols]
                setattr(self, name, buf)
            self._alloc = new
        sl = slice(self.cols, self.cols + w)
        self.P[:, sl] = P
        self.Q[:, sl] = Q
        self.QD[:, sl] = QD
        self.cols += w
        self.widths.append(w)

    def view(self, name: str) -> np.ndarray:
        return getattr(self, name)[:, : self.cols]


def solve_mcg(
    S: SchurMatrix,
    b_tilde: np.ndarray,
    M: Preconditioner | None,
    x0: np.ndarray | None,
    cfg: McgConfig,
    callback: Callback | None = None,
) -> tuple[np.ndarray, CgStats]:
    """Solve S x = -b_tilde with adaptive multidirectional CG.

    Same stopping rule as :func:`solve_pcg`.  After each step the tau-test
    t = gamma^T alpha / (r^T M^-1 r) is evaluated; t < tau enlarges the
    next direction block to one column per subset of ``cfg.partition``.
    """
    t0 = time.perf_counter()
    part = cfg.partition
    if not isinstance(part, Partition):
        part = make_partition(S.n_p, int(part))
    if part.n_poses != S.n_p:
        raise ValueError(f"partition covers {part.n_poses} poses, S has {S.n_p}")
    rank_tol = cfg.effective_rank_tol
    b = np.asarray(b_tilde, dtype=np.float64)
    n = b.size
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = -b - spmv(S, x)
    z = _apply(M, r)
    P = z[:, None]
    Q = spmv(S, z)[:, None]
    r0 = float(np.linalg.norm(r))
    stats = CgStats(residual_norm_history=[r0])
    if r0 == 0.0:
        stats.converged = True
        stats.wall_time = time.perf_counter() - t0
        return x, stats
    hist = _History(n, cfg.history_cap)

    for i in range(cfg.imax):
        width = P.shape[1]
        delta = Q.T @ P
        gamma = P.T @ r
        pinv, eig = _pinv_sym(delta, rank_tol)
        top = eig.max()
        if not (np.isfinite(delta).all() and top > 0.0 and eig.min() >= -1e-8 * top):
            raise SolverBreakdown(f"MCG breakdown at iteration {i}: eigenvalues of P^T S P in [{eig.min()}, {top}]")
        alpha = pinv @ gamma
        x = x + P @ alpha
        r = r - Q @ alpha
        rn = float(np.linalg.norm(r))
        if not np.isfinite(rn):
            raise SolverBreakdown(f"non-finite residual at iteration {i}")
        stats.iterations = i + 1
        stats.residual_norm_history.append(rn)
        stats.widths.append(width)
        if callback is not None:
            callback(IterationInfo(i, x, r, P, Q))
        if rn < cfg.epsilon * r0:
            stats.converged = True
            break

        t, z = tau_test(gamma, alpha, r, M)
        stats.tau_values.append(t)
        hist.append(P, Q, Q @ pinv)
        enlarge = t < cfg.tau and part.n_subsets > 1
        Z = expand_residual(z, part) if enlarge else z[:, None]
        # beta_j = pinv(Delta_j) Q_j^T Z for every stored block at once
        beta = hist.view("QD").T @ Z
        P = Z - hist.view("P") @ beta
        if enlarge:
            Q = spmm_structured(S, Z, part.subset_of) - hist.view("Q") @ beta
        else:
            Q = spmv(S, P[:, 0])[:, None]

    stats.wall_time = time.perf_counter() - t0
    return x, stats
