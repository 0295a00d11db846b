"""Fisheye projection model with six radial and two tangential coefficients.

Forward model for a camera-frame point (x, y, z):

    theta   = atan2(sqrt(x^2 + y^2), z)
    theta_d = theta * (1 + k1*theta^2 + k2*theta^4 + ... + k6*theta^12)
    (a, b)  = theta_d * (x, y) / sqrt(x^2 + y^2)
    a'      = a + 2*p1*a*b + p2*(r^2 + 2*a^2)        r^2 = a^2 + b^2
    b'      = b + p1*(r^2 + 2*b^2) + 2*p2*a*b
    pixel   = (fx*a' + cx, fy*b' + cy)

The tangential step is applied after the radial polynomial. Intrinsic
parameter vectors are ordered (fx, fy, cx, cy, k1..k6, p1, p2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import BehindCamera, InvalidArgument, NoConvergence

DEFAULT_THETA_MAX = math.radians(105.0)
INTRINSIC_COUNT = 12

_NEWTON_MAX_ITERS = 50
_NEWTON_STEP_TOL = 1e-12


@dataclass(frozen=True)
class PixelPoint:
    """Pixel coordinates in the distorted image domain."""

    u: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass(frozen=True)
class CameraModel:
    """Immutable fisheye intrinsics plus image geometry."""

    camera_id: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    k5: float = 0.0
    k6: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    theta_max: float = DEFAULT_THETA_MAX

    def __post_init__(self) -> None:
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise InvalidArgument("focal lengths must be positive")
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise InvalidArgument("principal point must lie inside the image")

    @property
    def radial(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.k3, self.k4, self.k5, self.k6])

    @property
    def intrinsics_vector(self) -> np.ndarray:
        return np.array(
            [self.fx, self.fy, self.cx, self.cy, self.k1, self.k2, self.k3,
             self.k4, self.k5, self.k6, self.p1, self.p2]
        )

    def with_intrinsics(self, vec: np.ndarray) -> "CameraModel":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (INTRINSIC_COUNT,):
            raise InvalidArgument(f"expected {INTRINSIC_COUNT} intrinsic parameters")
        return replace(
            self, fx=float(vec[0]), fy=float(vec[1]), cx=float(vec[2]), cy=float(vec[3]),
            k1=float(vec[4]), k2=float(vec[5]), k3=float(vec[6]), k4=float(vec[7]),
            k5=float(vec[8]), k6=float(vec[9]), p1=float(vec[10]), p2=float(vec[11]),
        )


def _radial_terms(theta_sq: np.ndarray, radial: np.ndarray):
    """Radial scale s(q) = 1 + sum k_i q^i and its derivative, q = theta^2."""
    s = np.ones_like(theta_sq)
    ds_dq = np.zeros_like(theta_sq)
    power = np.ones_like(theta_sq)
    for i, k in enumerate(radial, start=1):
        ds_dq += i * k * power
        power = power * theta_sq
        s += k * power
    return s, ds_dq


def _tangential(m: np.ndarray, p1: float, p2: float) -> np.ndarray:
    a, b = m[:, 0], m[:, 1]
    r2 = a * a + b * b
    return np.stack(
        [a + 2.0 * p1 * a * b + p2 * (r2 + 2.0 * a * a),
         b + p1 * (r2 + 2.0 * b * b) + 2.0 * p2 * a * b],
        axis=1,
    )


def _tangential_jacobian(m: np.ndarray, p1: float, p2: float) -> np.ndarray:
    a, b = m[:, 0], m[:, 1]
    jac = np.empty((m.shape[0], 2, 2))
    jac[:, 0, 0] = 1.0 + 2.0 * p1 * b + 6.0 * p2 * a
    jac[:, 0, 1] = 2.0 * p1 * a + 2.0 * p2 * b
    jac[:, 1, 0] = 2.0 * p1 * a + 2.0 * p2 * b
    jac[:, 1, 1] = 1.0 + 6.0 * p1 * b + 2.0 * p2 * a
    return jac


def _distort(w: np.ndarray, model: CameraModel):
    """Map w = theta * (x, y) / rho to the distorted normalized point."""
    theta_sq = np.sum(w * w, axis=1)
    s, _ = _radial_terms(theta_sq, model.radial)
    m = w * s[:, None]
    return _tangential(m, model.p1, model.p2), m


def _distort_jacobian(w: np.ndarray, model: CameraModel) -> np.ndarray:
    theta_sq = np.sum(w * w, axis=1)
    s, ds_dq = _radial_terms(theta_sq, model.radial)
    m = w * s[:, None]
    # dm/dw = s*I + 2*ds_dq * w w^T
    jr = s[:, None, None] * np.eye(2)[None, :, :]
    jr += 2.0 * ds_dq[:, None, None] * w[:, :, None] * w[:, None, :]
    jt = _tangential_jacobian(m, model.p1, model.p2)
    return np.einsum("nij,njk->nik", jt, jr)


def _points_to_w(points: np.ndarray, model: CameraModel):
    """Project 3D points onto the w-plane; raises when outside the FOV cone."""
    pts = np.asarray(points, dtype=np.float64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    rho = np.hypot(x, y)
    theta = np.arctan2(rho, z)
    bad = ~np.isfinite(theta) | (theta >= model.theta_max) | (rho * rho + z * z == 0.0)
    if np.any(bad):
        raise BehindCamera(
            f"{int(bad.sum())} point(s) at or beyond theta_max for {model.camera_id}"
        )
    on_axis = rho < 1e-30
    safe_rho = np.where(on_axis, 1.0, rho)
    g = theta / safe_rho
    if np.any(on_axis):
        g = g.copy()
        g[on_axis] = 1.0 / z[on_axis]  # z > 0 here since theta < theta_max
    w = g[:, None] * pts[:, :2]
    return w, pts, rho, theta, g, on_axis


def project_points(points: np.ndarray, model: CameraModel) -> np.ndarray:
    """Project (n, 3) camera-frame points to (n, 2) distorted pixels."""
    w, _, _, _, _, _ = _points_to_w(np.atleast_2d(points), model)
    md, _ = _distort(w, model)
    return np.stack(
        [model.fx * md[:, 0] + model.cx, model.fy * md[:, 1] + model.cy], axis=1
    )


def project_points_masked(points: np.ndarray, model: CameraModel):
    """Like project_points but returns (pixels, valid) instead of raising.

    Invalid rows (theta >= theta_max) hold NaN.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    rho = np.hypot(x, y)
    theta = np.arctan2(rho, z)
    valid = np.isfinite(theta) & (theta < model.theta_max) & (rho * rho + z * z > 0.0)
    pixels = np.full((pts.shape[0], 2), np.nan)
    if np.any(valid):
        pixels[valid] = project_points(pts[valid], model)
    return pixels, valid


def project(point: np.ndarray, model: CameraModel) -> PixelPoint:
    """Project a single camera-frame point to a distorted pixel."""
    px = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), model)
    return PixelPoint(float(px[0, 0]), float(px[0, 1]))


def project_with_jacobians_points(points: np.ndarray, model: CameraModel):
    """Pixels plus analytic Jacobians for a stack of points.

    Returns (pixels (n,2), d_pixel/d_point (n,2,3), d_pixel/d_intrinsics (n,2,12)).
    """
    w, pts, rho, theta, g, on_axis = _points_to_w(np.atleast_2d(points), model)
    n = pts.shape[0]
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    theta_sq = np.sum(w * w, axis=1)
    s, ds_dq = _radial_terms(theta_sq, model.radial)
    m = w * s[:, None]
    a, b = m[:, 0], m[:, 1]
    r2 = a * a + b * b
    md = _tangential(m, model.p1, model.p2)
    jt = _tangential_jacobian(m, model.p1, model.p2)
    focal = np.array([model.fx, model.fy])

    # dw/dp, guarding the on-axis limit where the cross terms vanish.
    n2 = rho * rho + z * z
    safe_rho = np.where(on_axis, 1.0, rho)
    dtheta_drho = z / n2
    dg_drho_over_rho = np.where(on_axis, 0.0, (dtheta_drho - g) / (safe_rho * safe_rho))
    dw_dp = np.empty((n, 2, 3))
    dw_dp[:, 0, 0] = g + x * x * dg_drho_over_rho
    dw_dp[:, 0, 1] = x * y * dg_drho_over_rho
    dw_dp[:, 1, 0] = dw_dp[:, 0, 1]
    dw_dp[:, 1, 1] = g + y * y * dg_drho_over_rho
    dw_dp[:, 0, 2] = -x / n2
    dw_dp[:, 1, 2] = -y / n2

    jr = s[:, None, None] * np.eye(2)[None, :, :]
    jr += 2.0 * ds_dq[:, None, None] * w[:, :, None] * w[:, None, :]
    dmd_dw = np.einsum("nij,njk->nik", jt, jr)
    j_point = focal[None, :, None] * np.einsum("nij,njk->nik", dmd_dw, dw_dp)

    j_intr = np.zeros((n, 2, INTRINSIC_COUNT))
    j_intr[:, 0, 0] = md[:, 0]
    j_intr[:, 1, 1] = md[:, 1]
    j_intr[:, 0, 2] = 1.0
    j_intr[:, 1, 3] = 1.0
    q_power = theta_sq.copy()
    for i in range(6):
        dm_dk = w * q_power[:, None]
        j_intr[:, :, 4 + i] = focal[None, :] * np.einsum("nij,nj->ni", jt, dm_dk)
        q_power = q_power * theta_sq
    j_intr[:, 0, 10] = model.fx * 2.0 * a * b
    j_intr[:, 1, 10] = model.fy * (r2 + 2.0 * b * b)
    j_intr[:, 0, 11] = model.fx * (r2 + 2.0 * a * a)
    j_intr[:, 1, 11] = model.fy * 2.0 * a * b

    pixels = np.stack([model.fx * md[:, 0] + model.cx, model.fy * md[:, 1] + model.cy], axis=1)
    return pixels, j_point, j_intr


def project_jacobians(point: np.ndarray, model: CameraModel):
    """(2x3 point Jacobian, 2x12 intrinsics Jacobian) for a single point."""
    _, jp, ji = project_with_jacobians_points(
        np.asarray(point, dtype=np.float64).reshape(1, 3), model
    )
    return jp[0], ji[0]


def unproject_points(pixels: np.ndarray, model: CameraModel) -> np.ndarray:
    """Invert the distortion for (n, 2) pixels; returns (n, 3) unit rays.

    Newton iteration on the w-plane, started from the distortion-free
    equidistant inverse. Raises NoConvergence when any pixel cannot be
    inverted (outside the invertible domain or beyond theta_max).
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    target = np.stack(
        [(px[:, 0] - model.cx) / model.fx, (px[:, 1] - model.cy) / model.fy], axis=1
    )
    w = target.copy()
    n = w.shape[0]
    active = np.ones(n, dtype=bool)
    for _ in range(_NEWTON_MAX_ITERS):
        if not np.any(active):
            break
        wa = w[active]
        md, _ = _distort(wa, model)
        f = md - target[active]
        jac = _distort_jacobian(wa, model)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        det = np.where(np.abs(det) < 1e-300, np.nan, det)
        dx = (-f[:, 0] * jac[:, 1, 1] + f[:, 1] * jac[:, 0, 1]) / det
        dy = (f[:, 0] * jac[:, 1, 0] - f[:, 1] * jac[:, 0, 0]) / det
        step = np.stack([dx, dy], axis=1)
        wa = wa + step
        w[active] = wa
        done = np.linalg.norm(step, axis=1) < _NEWTON_STEP_TOL
        done |= ~np.isfinite(step).all(axis=1)
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    md, _ = _distort(w, model)
    residual = np.linalg.norm(md - target, axis=1)
    theta = np.linalg.norm(w, axis=1)
    failed = active | ~np.isfinite(residual) | (residual > 1e-8) | (theta >= model.theta_max)
    if np.any(failed):
        raise NoConvergence(
            f"{int(failed.sum())} pixel(s) outside the invertible domain of {model.camera_id}"
        )
    rays = np.empty((n, 3))
    tiny = theta < 1e-12
    safe_theta = np.where(tiny, 1.0, theta)
    scale = np.where(tiny, 1.0, np.sin(theta) / safe_theta)
    rays[:, 0] = scale * w[:, 0]
    rays[:, 1] = scale * w[:, 1]
    rays[:, 2] = np.cos(theta)
    return rays


def unproject(pixel: PixelPoint, model: CameraModel) -> np.ndarray:
    """Unit ray whose projection reproduces the given pixel."""
    return unproject_points(pixel.as_array().reshape(1, 2), model)[0]
