"""Independent oracles shared by the test modules."""

from __future__ import annotations

import math

import numpy as np

from mcgba.camera import residuals_and_jacobians
from mcgba.problem_io import BAProblem, SyntheticConfig, generate_synthetic


def rotate_ld(w, X):
    """Axis-angle rotation of X in long double, written out from the axis form."""
    w = [np.longdouble(v) for v in w]
    X = [np.longdouble(v) for v in X]
    theta = np.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    if theta == 0:
        return X
    k = [v / theta for v in w]
    c, s = np.cos(theta), np.sin(theta)
    kx = [k[1] * X[2] - k[2] * X[1], k[2] * X[0] - k[0] * X[2], k[0] * X[1] - k[1] * X[0]]
    kd = k[0] * X[0] + k[1] * X[1] + k[2] * X[2]
    return [X[i] * c + kx[i] * s + k[i] * kd * (1 - c) for i in range(3)]


def project_ld(cam, X) -> np.ndarray:
    P = rotate_ld(cam[0:3], X)
    P = [P[i] + np.longdouble(cam[3 + i]) for i in range(3)]
    nx, ny = -P[0] / P[2], -P[1] / P[2]
    r2 = nx * nx + ny * ny
    f, k1, k2 = (np.longdouble(v) for v in cam[6:9])
    g = f * (1 + k1 * r2 + k2 * r2 * r2)
    return np.array([g * nx, g * ny], dtype=np.longdouble)


def fd_jacobian(cam, X, h=1e-6):
    """Central differences of the long-double projection, returns (2x9, 2x3)."""
    x = np.concatenate([np.asarray(cam, float), np.asarray(X, float)]).astype(np.longdouble)
    J = np.zeros((2, 12), dtype=np.longdouble)
    for j in range(12):
        e = np.zeros(12, dtype=np.longdouble)
        e[j] = h
        hi, lo = x + e, x - e
        J[:, j] = (project_ld(hi[:9], hi[9:]) - project_ld(lo[:9], lo[9:])) / (2 * np.longdouble(h))
    return J[:, :9].astype(float), J[:, 9:].astype(float)


def scalar_cost(problem: BAProblem) -> float:
    total = 0.0
    for c, p, (u, v) in zip(problem.camera_index, problem.point_index, problem.observations):
        pix = project_ld(problem.cameras[c], problem.points[p])
        total += float((pix[0] - u) ** 2 + (pix[1] - v) ** 2)
    return total


def dense_system(problem: BAProblem, lam: float, damping: str = "marquardt"):
    """Full J, then H = J^T J + lam D^T D and b = J^T r, all dense."""
    n_p, n_l = problem.n_cameras, problem.n_points
    blk = residuals_and_jacobians(
        problem.cameras[problem.camera_index], problem.points[problem.point_index], problem.observations
    )
    J = np.zeros((2 * problem.n_observations, 9 * n_p + 3 * n_l))
    for k, (c, p) in enumerate(zip(problem.camera_index, problem.point_index)):
        J[2 * k : 2 * k + 2, 9 * c : 9 * c + 9] = blk.J_cam[k]
        J[2 * k : 2 * k + 2, 9 * n_p + 3 * p : 9 * n_p + 3 * p + 3] = blk.J_pt[k]
    H = J.T @ J
    d = np.clip(np.diag(H), 1e-10, 1e32) if damping == "marquardt" else np.ones(H.shape[0])
    H = H + lam * np.diag(d)
    b = J.T @ blk.residual.ravel()
    return H, b


def random_problem(seed: int, max_p: int = 10, max_l: int = 30) -> BAProblem:
    rng = np.random.default_rng(seed)
    n_p = int(rng.integers(2, max_p + 1))
    n_l = int(rng.integers(max(n_p, 6), max_l + 1))
    d = float(rng.choice([0.5, 0.75, 1.0]))
    try:
        cfg = SyntheticConfig(n_p, n_l, d, noise_sigma=1.0, rng_seed=seed, camera_noise=0.02, point_noise=0.01)
        return generate_synthetic(cfg)
    except ValueError:
        cfg = SyntheticConfig(n_p, n_l, 1.0, noise_sigma=1.0, rng_seed=seed, camera_noise=0.02, point_noise=0.01)
        return generate_synthetic(cfg)


def spd_matrix(rng, n: int, cond: float = 1e3) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return (Q * np.logspace(0, math.log10(cond), n)) @ Q.T
