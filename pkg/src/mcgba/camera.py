"""BAL camera model: residuals, cost and analytic Jacobians.

Projection of a world point X by camera (w, t, f, k1, k2)::

    P = R(w) X + t
    n = -P[:2] / P[2]
    pixel = f * (1 + k1 |n|^2 + k2 |n|^4) * n

Everything is vectorized over a leading observation axis; the single-camera
helpers are thin wrappers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem_io import BAProblem, Camera


class DegenerateObservationError(ArithmeticError):
    """A point lies on the camera plane (zero depth) or projects to non-finite pixels."""

    def __init__(self, message: str, indices=None):
        self.indices = indices
        super().__init__(message)


def _skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _rodrigues_coeffs(theta2: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series near zero."""
    theta = np.sqrt(theta2)
    small = theta2 < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    c = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (safe - np.sin(safe)) / safe**3)
    return a, b, c


def rotation_matrices(rotvecs: np.ndarray) -> np.ndarray:
    w = np.asarray(rotvecs, dtype=np.float64)
    theta2 = np.einsum("...i,...i->...", w, w)
    a, b, _ = _rodrigues_coeffs(theta2)
    K = _skew(w)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def camera_points(cams: np.ndarray, points: np.ndarray) -> np.ndarray:
    """World points in camera coordinates, one camera row per point row."""
    R = rotation_matrices(cams[:, 0:3])
    return np.einsum("kij,kj->ki", R, points) + cams[:, 3:6]


def _check_depth(P: np.ndarray) -> None:
    bad = P[:, 2] == 0.0
    if bad.any():
        idx = np.flatnonzero(bad)
        raise DegenerateObservationError(f"{idx.size} observation(s) at zero depth", idx)


def project_points(cams: np.ndarray, points: np.ndarray) -> np.ndarray:
    cams = np.atleast_2d(np.asarray(cams, dtype=np.float64))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    P = camera_points(cams, points)
    _check_depth(P)
    n = -P[:, :2] / P[:, 2:3]
    r2 = np.einsum("ki,ki->k", n, n)
    radial = 1.0 + cams[:, 7] * r2 + cams[:, 8] * r2 * r2
    pix = (cams[:, 6] * radial)[:, None] * n
    if not np.isfinite(pix).all():
        idx = np.flatnonzero(~np.isfinite(pix).all(axis=1))
        raise DegenerateObservationError(f"{idx.size} non-finite projection(s)", idx)
    return pix


def project(camera: Camera, point) -> np.ndarray:
    return project_points(camera.to_params()[None], np.asarray(point, dtype=np.float64)[None])[0]


def residual(camera: Camera, point, measurement) -> np.ndarray:
    return project(camera, point) - np.asarray(measurement, dtype=np.float64)


@dataclass
class ResidualJacobianBlock:
    residual: np.ndarray  # (..., 2)
    J_cam: np.ndarray  # (..., 2, 9)
    J_pt: np.ndarray  # (..., 2, 3)


def residuals_and_jacobians(
    cams: np.ndarray, points: np.ndarray, measurements: np.ndarray | None = None
) -> ResidualJacobianBlock:
    """Residuals with their 2x9 camera and 2x3 point Jacobians, per row.

    The rotation derivative is d(R v)/dw = -R [v]x J_r(w), with J_r the right
    Jacobian of SO(3).
    """
    cams = np.atleast_2d(np.asarray(cams, dtype=np.float64))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    m = cams.shape[0]
    w = cams[:, 0:3]
    theta2 = np.einsum("ki,ki->k", w, w)
    a, b, c = _rodrigues_coeffs(theta2)
    K = _skew(w)
    K2 = K @ K
    R = np.eye(3) + a[:, None, None] * K + b[:, None, None] * K2
    Jr = np.eye(3) - b[:, None, None] * K + c[:, None, None] * K2

    P = np.einsum("kij,kj->ki", R, points) + cams[:, 3:6]
    _check_depth(P)
    inv_z = 1.0 / P[:, 2]
    n = -P[:, :2] * inv_z[:, None]
    r2 = np.einsum("ki,ki->k", n, n)
    f, k1, k2 = cams[:, 6], cams[:, 7], cams[:, 8]
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    pix = (f * radial)[:, None] * n

    # d pixel / d n
    dpix_dn = (f * radial)[:, None, None] * np.eye(2) + (f * (2 * k1 + 4 * k2 * r2))[
        :, None, None
    ] * np.einsum("ki,kj->kij", n, n)
    # d n / d P
    dn_dP = np.zeros((m, 2, 3))
    dn_dP[:, 0, 0] = -inv_z
    dn_dP[:, 1, 1] = -inv_z
    dn_dP[:, :, 2] = P[:, :2] * (inv_z * inv_z)[:, None]
    dpix_dP = dpix_dn @ dn_dP

    J_cam = np.empty((m, 2, 9))
    dP_dw = -R @ _skew(points) @ Jr
    J_cam[:, :, 0:3] = dpix_dP @ dP_dw
    J_cam[:, :, 3:6] = dpix_dP
    J_cam[:, :, 6] = radial[:, None] * n
    J_cam[:, :, 7] = (f * r2)[:, None] * n
    J_cam[:, :, 8] = (f * r2 * r2)[:, None] * n
    J_pt = dpix_dP @ R

    res = pix if measurements is None else pix - np.asarray(measurements, dtype=np.float64)
    if not (np.isfinite(res).all() and np.isfinite(J_cam).all() and np.isfinite(J_pt).all()):
        raise DegenerateObservationError("non-finite residual or Jacobian")
    return ResidualJacobianBlock(res, J_cam, J_pt)


def residual_jacobians(camera: Camera, point, measurement=None) -> ResidualJacobianBlock:
    blk = residuals_and_jacobians(
        camera.to_params()[None],
        np.asarray(point, dtype=np.float64)[None],
        None if measurement is None else np.asarray(measurement, dtype=np.float64)[None],
    )
    return ResidualJacobianBlock(blk.residual[0], blk.J_cam[0], blk.J_pt[0])


def problem_residuals(problem: BAProblem, cameras=None, points=None) -> np.ndarray:
    """(n_obs, 2) residuals at the given state (default: the problem's own)."""
    cams = problem.cameras if cameras is None else cameras
    pts = problem.points if points is None else points
    pix = project_points(cams[problem.camera_index], pts[problem.point_index])
    return pix - problem.observations


def total_cost(problem: BAProblem, cameras=None, points=None) -> float:
    """Sum of squared residual norms, summed in observation order."""
    r = problem_residuals(problem, cameras, points)
    return float(np.sum(np.einsum("ki,ki->k", r, r)))
