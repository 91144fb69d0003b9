"""Damped normal equations, the reduced camera system and its block-sparse algebra.

Block conventions: camera blocks are 9x9, point blocks 3x3, and the
camera/point coupling ``W`` holds one 9x3 block per observation (a
camera sees a point at most once).  The Schur complement ``S`` is stored in
block-row compressed form (``indptr``, ``indices``, ``blocks``) ordered by
pose index, which is exactly scipy's BSR layout; products go through
``scipy.sparse.bsr_matrix`` built on the same arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .camera import residuals_and_jacobians
from .problem_io import CAMERA_DIM, POINT_DIM, BAProblem

DAMPING_MIN = 1e-10
DAMPING_MAX = 1e32


class SingularBlockError(np.linalg.LinAlgError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


@dataclass
class Linearization:
    """Undamped per-observation Jacobian products at one state.

    Kept separately so a rejected LM step only re-applies damping.
    """

    problem: BAProblem
    U: np.ndarray  # (n_p, 9, 9)   J_p^T J_p diagonal blocks
    V: np.ndarray  # (n_l, 3, 3)
    W: np.ndarray  # (n_obs, 9, 3) one block per observation
    b_p: np.ndarray  # (9 n_p,)
    b_l: np.ndarray  # (3 n_l,)
    residuals: np.ndarray  # (n_obs, 2)


@dataclass
class NormalBlocks:
    problem: BAProblem
    U_blocks: np.ndarray  # damped, (n_p, 9, 9)
    V_blocks: np.ndarray  # damped, (n_l, 3, 3)
    W_blocks: np.ndarray  # (n_obs, 9, 3), keyed by observation (camera_index, point_index)
    b_p: np.ndarray
    b_l: np.ndarray
    lam: float
    D_p_diag: np.ndarray  # squared damping diagonal, (9 n_p,)
    D_l_diag: np.ndarray  # (3 n_l,)

    @property
    def n_p(self) -> int:
        return self.U_blocks.shape[0]

    @property
    def n_l(self) -> int:
        return self.V_blocks.shape[0]

    @cached_property
    def V_inv(self) -> np.ndarray:
        return invert_point_blocks(self.V_blocks)


def _block_sum(blocks: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + blocks.shape[1:])
    np.add.at(out, index, blocks)
    return out


def linearize(problem: BAProblem, cameras=None, points=None) -> Linearization:
    cams = problem.cameras if cameras is None else cameras
    pts = problem.points if points is None else points
    ci, pi = problem.camera_index, problem.point_index
    blk = residuals_and_jacobians(cams[ci], pts[pi], problem.observations)
    Jc, Jp, r = blk.J_cam, blk.J_pt, blk.residual
    U = _block_sum(np.einsum("kai,kaj->kij", Jc, Jc), ci, problem.n_cameras)
    V = _block_sum(np.einsum("kai,kaj->kij", Jp, Jp), pi, problem.n_points)
    W = np.einsum("kai,kaj->kij", Jc, Jp)
    b_p = _block_sum(np.einsum("kai,ka->ki", Jc, r), ci, problem.n_cameras).ravel()
    b_l = _block_sum(np.einsum("kai,ka->ki", Jp, r), pi, problem.n_points).ravel()
    return Linearization(problem, U, V, W, b_p, b_l, r)


def damp(lin: Linearization, lam: float, damping: str = "marquardt") -> NormalBlocks:
    """Add lam * D^T D to the diagonal blocks.

    ``marquardt``: D^2 = diag(J^T J) clamped to [1e-10, 1e32].
    ``identity``:  D = I.
    """
    if lam < 0:
        raise ValueError("damping must be non-negative")
    n_p, n_l = lin.U.shape[0], lin.V.shape[0]
    if damping == "marquardt":
        dp = np.clip(np.diagonal(lin.U, axis1=1, axis2=2), DAMPING_MIN, DAMPING_MAX)
        dl = np.clip(np.diagonal(lin.V, axis1=1, axis2=2), DAMPING_MIN, DAMPING_MAX)
    elif damping == "identity":
        dp = np.ones((n_p, CAMERA_DIM))
        dl = np.ones((n_l, POINT_DIM))
    else:
        raise ValueError(f"unknown damping {damping!r}")
    U = lin.U.copy()
    V = lin.V.copy()
    ip, il = np.arange(CAMERA_DIM), np.arange(POINT_DIM)
    U[:, ip, ip] += lam * dp
    V[:, il, il] += lam * dl
    return NormalBlocks(lin.problem, U, V, lin.W, lin.b_p, lin.b_l, lam, dp.ravel(), dl.ravel())


def build_normal_blocks(
    problem: BAProblem, cameras=None, points=None, lam: float = 0.0, damping: str = "marquardt"
) -> NormalBlocks:
    return damp(linearize(problem, cameras, points), lam, damping)


def invert_point_blocks(V: np.ndarray) -> np.ndarray:
    # 3x3 blocks: explicit inverse is exact enough and cheap
    det = np.linalg.det(V)
    scale = np.einsum("kij,kij->k", V, V) ** 1.5
    bad = ~(np.abs(det) > 1e-14 * scale)
    if bad.any():
        raise SingularBlockError(f"{int(bad.sum())} singular point block(s), first at {np.flatnonzero(bad)[0]}")
    inv = np.linalg.inv(V)
    return 0.5 * (inv + inv.transpose(0, 2, 1))


# ---------------------------------------------------------------------------
# Schur complement


@dataclass(frozen=True)
class SchurMatrix:
    """Symmetric block-sparse matrix with 9x9 blocks in block-row order."""

    n_p: int
    indptr: np.ndarray  # (n_p + 1,)
    indices: np.ndarray  # (nnzb,) column pose of each block, sorted within a row
    blocks: np.ndarray  # (nnzb, 9, 9)
    block_dim: int = CAMERA_DIM

    @property
    def nnz_blocks(self) -> int:
        return self.indices.size

    @property
    def size(self) -> int:
        return self.n_p * self.block_dim

    @cached_property
    def block_rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_p), np.diff(self.indptr))

    @cached_property
    def diag_positions(self) -> np.ndarray:
        pos = np.flatnonzero(self.block_rows == self.indices)
        if pos.size != self.n_p:
            raise ValueError("Schur matrix is missing diagonal blocks")
        return pos

    @cached_property
    def bsr(self) -> sp.bsr_matrix:
        return sp.bsr_matrix((self.blocks, self.indices, self.indptr), shape=(self.size, self.size))

    def diagonal_blocks(self) -> np.ndarray:
        return self.blocks[self.diag_positions]

    def block(self, m: int, j: int) -> np.ndarray | None:
        lo, hi = self.indptr[m], self.indptr[m + 1]
        k = lo + np.searchsorted(self.indices[lo:hi], j)
        if k < hi and self.indices[k] == j:
            return self.blocks[k]
        return None

    def todense(self) -> np.ndarray:
        return self.bsr.toarray()

    @classmethod
    def from_dense(cls, A: np.ndarray, block_dim: int = CAMERA_DIM, keep_zero_blocks: bool = False):
        A = np.asarray(A, dtype=np.float64)
        n = A.shape[0] // block_dim
        B = A.reshape(n, block_dim, n, block_dim).transpose(0, 2, 1, 3)
        present = np.ones((n, n), bool) if keep_zero_blocks else np.any(B != 0, axis=(2, 3))
        present |= np.eye(n, dtype=bool)
        rows, cols = np.nonzero(present)
        indptr = np.concatenate([[0], np.cumsum(present.sum(axis=1))])
        return cls(n, indptr, cols, B[rows, cols].copy(), block_dim)


def coobservation_pattern(problem: BAProblem) -> sp.csr_matrix:
    """Boolean n_p x n_p pattern: (m, j) set iff cameras m and j share a point."""
    inc = sp.csr_matrix(
        (np.ones(problem.n_observations), (problem.camera_index, problem.point_index)),
        shape=(problem.n_cameras, problem.n_points),
    )
    G = (inc @ inc.T).tocsr()
    G.sort_indices()
    return G


def _observation_pairs(point_index: np.ndarray, chunk_pairs: int):
    """Yield (o1, o2) arrays of all ordered observation pairs sharing a point.

    Chunks never split a point's pair list and hold roughly ``chunk_pairs`` pairs.
    """
    order = np.argsort(point_index, kind="stable")
    counts = np.bincount(point_index)
    counts = counts[counts > 0]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    sq = counts.astype(np.int64) ** 2
    cum = np.cumsum(sq)
    g0 = 0
    n_groups = counts.size
    while g0 < n_groups:
        base = cum[g0 - 1] if g0 else 0
        g1 = int(np.searchsorted(cum, base + chunk_pairs, side="right"))
        g1 = max(g1, g0 + 1)
        c = counts[g0:g1]
        s = starts[g0:g1]
        # obs position within the sorted order, repeated once per partner
        pos = np.repeat(np.arange(s[0], s[-1] + c[-1]), np.repeat(c, c))
        grp_start = np.repeat(s, c * c)
        within = np.arange(int(sq[g0:g1].sum())) - np.repeat(np.cumsum(c * c) - c * c, c * c)
        partner = grp_start + within % np.repeat(c, c * c)
        yield order[pos], order[partner]
        g0 = g1


def compute_schur(nb: NormalBlocks, chunk_pairs: int = 200_000) -> tuple[SchurMatrix, np.ndarray]:
    """S = U - W V^-1 W^T and rhs b~ = b_p - W V^-1 b_l."""
    problem = nb.problem
    n_p = problem.n_cameras
    ci, pi = problem.camera_index, problem.point_index
    Vinv = nb.V_inv
    Y = np.einsum("kij,kjl->kil", nb.W_blocks, Vinv[pi])  # W_o V^-1, (n_obs, 9, 3)

    b_l = nb.b_l.reshape(-1, POINT_DIM)
    corr = np.zeros((n_p, CAMERA_DIM))
    np.add.at(corr, ci, np.einsum("kij,kj->ki", Y, b_l[pi]))
    rhs = nb.b_p - corr.ravel()

    G = coobservation_pattern(problem)
    indptr, indices = G.indptr.astype(np.int64), G.indices.astype(np.int64)
    # flat key -> block slot
    keys = np.repeat(np.arange(n_p), np.diff(indptr)) * n_p + indices
    blocks = np.zeros((indices.size, CAMERA_DIM, CAMERA_DIM))
    for o1, o2 in _observation_pairs(pi, chunk_pairs):
        k = ci[o1] * n_p + ci[o2]
        order = np.argsort(k, kind="stable")
        k, o1, o2 = k[order], o1[order], o2[order]
        contrib = np.einsum("kij,klj->kil", Y[o1], nb.W_blocks[o2])
        uniq, first = np.unique(k, return_index=True)
        summed = np.add.reduceat(contrib, first, axis=0)
        blocks[np.searchsorted(keys, uniq)] -= summed
    diag = np.searchsorted(keys, np.arange(n_p) * (n_p + 1))
    blocks[diag] += nb.U_blocks
    return SchurMatrix(n_p, indptr, indices, blocks), rhs


def backsubstitute(nb: NormalBlocks, delta_x_p: np.ndarray) -> np.ndarray:
    """Point update dx_l = -V^-1 (b_l + W^T dx_p), blockwise per point.

    This is the second block row of H dx = -b solved for dx_l.
    """
    problem = nb.problem
    dxp = np.asarray(delta_x_p, dtype=np.float64).reshape(-1, CAMERA_DIM)
    wt = np.zeros((problem.n_points, POINT_DIM))
    np.add.at(wt, problem.point_index, np.einsum("kij,ki->kj", nb.W_blocks, dxp[problem.camera_index]))
    rhs = nb.b_l.reshape(-1, POINT_DIM) + wt
    return -np.einsum("kij,kj->ki", nb.V_inv, rhs).ravel()


def spmv(S: SchurMatrix, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (S.size,):
        raise ValueError(f"vector of length {S.size} expected, got {v.shape}")
    return S.bsr @ v


def spmm_structured(S: SchurMatrix, Z: np.ndarray, subset_of: np.ndarray) -> np.ndarray:
    """S @ Z for Z whose column p is supported on the block-rows of subset p.

    ``subset_of`` maps pose -> column.  Each block S[m, k] is applied once, to
    the column owning pose k, so the cost is one block product per stored
    block no matter how many columns Z has.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n_cols = Z.shape[1]
    d = S.block_dim
    subset_of = np.asarray(subset_of)
    # collapse the disjoint columns into one vector
    zc = Z.reshape(S.n_p, d, n_cols)[np.arange(S.n_p), :, subset_of]
    prod = np.einsum("bij,bj->bi", S.blocks, zc[S.indices])
    target = S.block_rows * n_cols + subset_of[S.indices]
    out = np.zeros((S.n_p * n_cols, d))
    if np.all(np.diff(target) >= 0):
        uniq, first = np.unique(target, return_index=True)
        out[uniq] = np.add.reduceat(prod, first, axis=0)
    else:
        np.add.at(out, target, prod)
    return out.reshape(S.n_p, n_cols, d).transpose(0, 2, 1).reshape(S.size, n_cols)


def schur_density(S: SchurMatrix) -> float:
    """Stored blocks (diagonal included) over n_p^2."""
    return S.nnz_blocks / float(S.n_p * S.n_p)


@dataclass(frozen=True)
class BlockJacobiPreconditioner:
    inv_diag_blocks: np.ndarray  # (n_p, 9, 9)

    def apply(self, r: np.ndarray) -> np.ndarray:
        n_p, d, _ = self.inv_diag_blocks.shape
        return np.einsum("pij,pj->pi", self.inv_diag_blocks, np.asarray(r).reshape(n_p, d)).ravel()

    __call__ = apply


def block_jacobi(S: SchurMatrix) -> BlockJacobiPreconditioner:
    D = S.diagonal_blocks()
    try:
        L = np.linalg.cholesky(D)
    except np.linalg.LinAlgError:
        bad = [i for i, blk in enumerate(D) if not _is_spd(blk)]
        raise NotPositiveDefiniteError(f"diagonal block(s) {bad[:5]} of S are not SPD") from None
    Linv = np.linalg.inv(L)
    inv = np.einsum("pki,pkj->pij", Linv, Linv)
    return BlockJacobiPreconditioner(inv)


def _is_spd(block: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(block)
    except np.linalg.LinAlgError:
        return False
    return True
