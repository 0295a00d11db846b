"""Independent calibration verification against a fiducial/mocap target.

The verification device is a printed square fiducial rigidly coupled to a
mocap rigid body whose centroid coincides with the fiducial center. Each
frame yields two independent estimates of the device center in the image:
one warped from the detected corners through a homography (image domain
only, no 3D pose estimation), and one by projecting the mocap centroid
through the calibration under test. Their distance is the 2D error; a
depth-matched back-projection gives the companion 3D error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import CameraModel, PixelPoint, project, unproject_points
from .chain import ChainEstimate, camera_from_world
from .errors import (
    BehindCamera,
    DegenerateHomography,
    EmptyRecording,
    InvalidArgument,
    TooFewReports,
    ValidationError,
)
from .geometry import RigidTransform

# Heatmap class boundaries in pixels; intervals are half-open on the right.
HEATMAP_THRESHOLDS = (0.5, 1.5, 3.0)
HEATMAP_CLASS_NAMES = ("green", "yellow", "red", "magenta")
_HEATMAP_RGB = {
    -1: (0, 0, 0),
    0: (0, 200, 0),
    1: (230, 200, 0),
    2: (220, 0, 0),
    3: (220, 0, 220),
}

# Canonical unit square corners: top-left, top-right, bottom-right,
# bottom-left, so the canonical center is (0, 0).
CANONICAL_SQUARE = np.array(
    [[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]
)


@dataclass(frozen=True, eq=False)
class LollypopFrame:
    """One verification observation: 4 detected corners plus the tracked centroid."""

    frame_id: int
    camera_id: str
    aruco_corners: tuple[PixelPoint, PixelPoint, PixelPoint, PixelPoint]
    mocap_centroid: np.ndarray
    platform_pose: RigidTransform | None = None

    def __post_init__(self) -> None:
        if len(self.aruco_corners) != 4:
            raise InvalidArgument("exactly 4 fiducial corners required")
        c = np.array(self.mocap_centroid, dtype=np.float64)
        if c.shape != (3,):
            raise InvalidArgument("mocap_centroid must be a 3-vector")
        c.setflags(write=False)
        object.__setattr__(self, "aruco_corners", tuple(self.aruco_corners))
        object.__setattr__(self, "mocap_centroid", c)

    def corner_array(self) -> np.ndarray:
        return np.array([[p.u, p.v] for p in self.aruco_corners])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LollypopFrame):
            return NotImplemented
        return (
            self.frame_id == other.frame_id
            and self.camera_id == other.camera_id
            and self.aruco_corners == other.aruco_corners
            and np.array_equal(self.mocap_centroid, other.mocap_centroid)
            and self.platform_pose == other.platform_pose
        )


@dataclass(frozen=True)
class FrameError:
    frame_id: int
    camera_id: str
    e2d: float
    e3d: float
    p_aruco: PixelPoint
    p_mocap: PixelPoint


@dataclass(frozen=True)
class CameraVerification:
    rmse_2d: float
    rmse_3d: float
    passed: bool
    count: int


@dataclass(frozen=True)
class VerificationReport:
    per_frame: list[FrameError]
    rmse_2d: float
    rmse_3d: float
    passed: bool
    threshold_2d: float
    per_camera: dict[str, CameraVerification]


def homography_from_quad(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact 3x3 homography mapping four src points to four dst points."""
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    rows = []
    for (sx, sy), (dx, dy) in zip(src, dst):
        rows.append([sx, sy, 1, 0, 0, 0, -dx * sx, -dx * sy, -dx])
        rows.append([0, 0, 0, sx, sy, 1, -dy * sx, -dy * sy, -dy])
    a = np.asarray(rows)
    _, sv, vt = np.linalg.svd(a)
    if sv[0] <= 0.0 or sv[-2] <= 1e-10 * sv[0]:
        raise DegenerateHomography("quad correspondences are degenerate")
    h = vt[-1].reshape(3, 3)
    if abs(h[2, 2]) > 1e-12:
        h = h / h[2, 2]
    return h


def _undistort_to_normalized(corners: np.ndarray, model: CameraModel) -> np.ndarray:
    rays = unproject_points(corners, model)
    if np.any(rays[:, 2] <= 1e-9):
        raise BehindCamera("fiducial corner ray at or beyond 90 degrees")
    return rays[:, :2] / rays[:, 2:3]


def aruco_center(
    corners: tuple[PixelPoint, ...] | np.ndarray, model: CameraModel
) -> PixelPoint:
    """Fiducial center from the four detected corners, via homography warp.

    Corners are undistorted to normalized coordinates, a homography from the
    canonical unit square is fit, the canonical center is warped through it,
    and the result is mapped back to distorted pixel coordinates. Operates
    entirely in the image domain.
    """
    if isinstance(corners, np.ndarray):
        arr = np.asarray(corners, dtype=np.float64).reshape(4, 2)
    else:
        arr = np.array([[p.u, p.v] for p in corners])
    normalized = _undistort_to_normalized(arr, model)
    h = homography_from_quad(CANONICAL_SQUARE, normalized)
    center_h = h @ np.array([0.0, 0.0, 1.0])
    if abs(center_h[2]) < 1e-12:
        raise DegenerateHomography("canonical center maps to infinity")
    center_n = center_h[:2] / center_h[2]
    return project(np.array([center_n[0], center_n[1], 1.0]), model)


def _implied_view_angle(corners: np.ndarray, model: CameraModel) -> float:
    """Incidence angle (radians) between the viewing ray and the fiducial plane
    normal, implied by the corner homography."""
    normalized = _undistort_to_normalized(corners, model)
    h = homography_from_quad(CANONICAL_SQUARE, normalized)
    normal = np.cross(h[:, 0], h[:, 1])
    nn = np.linalg.norm(normal)
    center_h = h @ np.array([0.0, 0.0, 1.0])
    ray = np.array([center_h[0], center_h[1], center_h[2]])
    rn = np.linalg.norm(ray)
    if nn < 1e-12 or rn < 1e-12:
        raise DegenerateHomography("cannot infer viewing angle")
    cosang = abs(float(normal @ ray)) / (nn * rn)
    return math.acos(min(1.0, cosang))


def project_mocap_center(
    frame: LollypopFrame, extrinsic: RigidTransform, model: CameraModel
) -> PixelPoint:
    """Predicted device center: the mocap centroid pushed through the calibration."""
    cam = camera_from_world(extrinsic, frame.platform_pose)
    return project(cam.apply(frame.mocap_centroid), model)


def frame_errors(
    frame: LollypopFrame, extrinsic: RigidTransform, model: CameraModel
) -> tuple[float, float]:
    """(2D pixel error, 3D metric error) for one verification frame.

    The 3D error back-projects the detected center to the camera-frame depth
    (z-coordinate) of the projected mocap centroid; the resulting distance is
    frame-invariant, so it is computed in the camera frame.
    """
    p_aruco = aruco_center(frame.corner_array(), model)
    p_mocap = project_mocap_center(frame, extrinsic, model)
    e2d = float(np.hypot(p_aruco.u - p_mocap.u, p_aruco.v - p_mocap.v))
    cam = camera_from_world(extrinsic, frame.platform_pose)
    centroid_cam = cam.apply(frame.mocap_centroid)
    ray = unproject_points(np.array([[p_aruco.u, p_aruco.v]]), model)[0]
    if ray[2] <= 1e-12 or centroid_cam[2] <= 0.0:
        raise BehindCamera("cannot depth-match the detected center")
    aruco_cam = ray * (centroid_cam[2] / ray[2])
    e3d = float(np.linalg.norm(centroid_cam - aruco_cam))
    return e2d, e3d


def verify(
    recording: list[LollypopFrame],
    estimate: ChainEstimate,
    threshold_2d: float = 1.0,
    max_view_angle_deg: float | None = None,
) -> VerificationReport:
    """Per-frame errors and pooled RMSE with a pass/fail decision.

    max_view_angle_deg optionally drops frames whose corner homography
    implies a grazing view of the fiducial plane.
    """
    if not recording:
        raise EmptyRecording("verification recording is empty")
    per_frame: list[FrameError] = []
    for frame in recording:
        if frame.camera_id not in estimate.extrinsics:
            raise ValidationError(f"estimate has no extrinsic for {frame.camera_id}")
        model = estimate.intrinsics[frame.camera_id]
        corners = frame.corner_array()
        if max_view_angle_deg is not None:
            if _implied_view_angle(corners, model) > math.radians(max_view_angle_deg):
                continue
        extrinsic = estimate.extrinsics[frame.camera_id]
        p_aruco = aruco_center(corners, model)
        p_mocap = project_mocap_center(frame, extrinsic, model)
        e2d, e3d = frame_errors(frame, extrinsic, model)
        per_frame.append(
            FrameError(frame.frame_id, frame.camera_id, e2d, e3d, p_aruco, p_mocap)
        )
    if not per_frame:
        raise EmptyRecording("no frames survived the viewing-angle filter")
    e2 = np.array([f.e2d for f in per_frame])
    e3 = np.array([f.e3d for f in per_frame])
    per_camera = {}
    for cam_id in sorted({f.camera_id for f in per_frame}):
        sel = np.array([f.camera_id == cam_id for f in per_frame])
        r2 = float(np.sqrt(np.mean(e2[sel] ** 2)))
        r3 = float(np.sqrt(np.mean(e3[sel] ** 2)))
        per_camera[cam_id] = CameraVerification(r2, r3, r2 <= threshold_2d, int(sel.sum()))
    rmse_2d = float(np.sqrt(np.mean(e2**2)))
    rmse_3d = float(np.sqrt(np.mean(e3**2)))
    return VerificationReport(
        per_frame=per_frame,
        rmse_2d=rmse_2d,
        rmse_3d=rmse_3d,
        passed=rmse_2d <= threshold_2d,
        threshold_2d=threshold_2d,
        per_camera=per_camera,
    )


# ---------------------------------------------------------------------------
# Spatial heatmaps.


@dataclass(frozen=True, eq=False)
class ErrorHeatmap:
    """Image-position-binned mean 2D error for one camera."""

    camera_id: str
    mean_error: np.ndarray  # (ny, nx); NaN where count == 0
    count: np.ndarray  # (ny, nx)
    bin_size: float
    width: int
    height: int
    thresholds: tuple[float, float, float] = HEATMAP_THRESHOLDS

    def class_grid(self) -> np.ndarray:
        """Integer classes: -1 empty, 0 green, 1 yellow, 2 red, 3 magenta.

        Boundaries are half-open: a bin mean equal to a threshold falls in
        the higher class.
        """
        t = self.thresholds
        cls = np.full(self.mean_error.shape, -1, dtype=np.int64)
        occupied = self.count > 0
        m = self.mean_error
        cls[occupied & (m < t[0])] = 0
        cls[occupied & (m >= t[0]) & (m < t[1])] = 1
        cls[occupied & (m >= t[1]) & (m < t[2])] = 2
        cls[occupied & (m >= t[2])] = 3
        return cls


def build_heatmap(
    report: VerificationReport, model: CameraModel, bin_size: float = 64.0
) -> ErrorHeatmap:
    """Bin the report's 2D errors by detected-center image position."""
    frames = [f for f in report.per_frame if f.camera_id == model.camera_id]
    nx = int(math.ceil(model.width / bin_size))
    ny = int(math.ceil(model.height / bin_size))
    total = np.zeros((ny, nx))
    count = np.zeros((ny, nx), dtype=np.int64)
    for f in frames:
        ix = int(f.p_aruco.u // bin_size)
        iy = int(f.p_aruco.v // bin_size)
        if 0 <= ix < nx and 0 <= iy < ny:
            total[iy, ix] += f.e2d
            count[iy, ix] += 1
    mean = np.full((ny, nx), np.nan)
    occupied = count > 0
    mean[occupied] = total[occupied] / count[occupied]
    return ErrorHeatmap(model.camera_id, mean, count, bin_size, model.width, model.height)


def heatmap_to_ppm(heatmap: ErrorHeatmap) -> str:
    """Plain-text portable pixmap with one pixel per bin."""
    cls = heatmap.class_grid()
    ny, nx = cls.shape
    lines = ["P3", f"{nx} {ny}", "255"]
    for row in cls:
        lines.append(" ".join("%d %d %d" % _HEATMAP_RGB[int(c)] for c in row))
    return "\n".join(lines) + "\n"


def heatmap_to_text(heatmap: ErrorHeatmap) -> str:
    """Plain-text grid of per-bin mean errors; '-' marks empty bins."""
    lines = [
        f"# camera={heatmap.camera_id} bin_size={heatmap.bin_size:g} "
        f"thresholds={heatmap.thresholds}"
    ]
    for iy in range(heatmap.mean_error.shape[0]):
        cells = []
        for ix in range(heatmap.mean_error.shape[1]):
            if heatmap.count[iy, ix] == 0:
                cells.append("-")
            else:
                cells.append(f"{heatmap.mean_error[iy, ix]:.4f}")
        lines.append(" ".join(cells))
    return "\n".join(lines) + "\n"


def save_heatmap(heatmap: ErrorHeatmap, ppm_path: str, text_path: str) -> None:
    with open(ppm_path, "w") as fh:
        fh.write(heatmap_to_ppm(heatmap))
    with open(text_path, "w") as fh:
        fh.write(heatmap_to_text(heatmap))


# ---------------------------------------------------------------------------
# Drift series.


@dataclass(frozen=True)
class DriftSeries:
    """Chronological RMSE series with a least-squares trend flag."""

    entries: list[tuple[int, float, float]]  # (index, rmse_2d, rmse_3d)
    slope_2d: float
    slope_3d: float
    rising: bool


def drift_series(reports: list[VerificationReport]) -> DriftSeries:
    """RMSE trend over successive verification reports, in the given order."""
    if len(reports) < 2:
        raise TooFewReports("drift analysis needs at least 2 reports")
    entries = [(i, r.rmse_2d, r.rmse_3d) for i, r in enumerate(reports)]
    idx = np.arange(len(reports), dtype=np.float64)
    r2 = np.array([e[1] for e in entries])
    r3 = np.array([e[2] for e in entries])
    denom = float(np.sum((idx - idx.mean()) ** 2))
    slope_2d = float(np.sum((idx - idx.mean()) * (r2 - r2.mean())) / denom)
    slope_3d = float(np.sum((idx - idx.mean()) * (r3 - r3.mean())) / denom)
    return DriftSeries(entries, slope_2d, slope_3d, rising=slope_2d > 0.0)
