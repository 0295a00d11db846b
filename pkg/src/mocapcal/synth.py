"""Synthetic scene generation: the ground-truth oracle for the pipeline.

Scenes place a handful of fisheye cameras around a capture volume, move a
marker board along a smooth spline through it, and render noisy corner
detections plus mocap poses that are exactly consistent with a known chain.
A matching verification recording is generated from a smaller square
fiducial device whose center coincides with its tracked centroid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import CameraModel, PixelPoint, project_points_masked
from .chain import (
    BoardGeometry,
    CalibrationDataset,
    ChainEstimate,
    MocapFrame,
    Observation,
    camera_from_world,
    make_grid_board,
)
from .errors import InfeasibleTrajectory, InvalidArgument
from .geometry import (
    RigidTransform,
    Twist,
    quaternion_to_matrix,
    se3_exp,
    so3_exp,
)

_IMAGE_W = 1280
_IMAGE_H = 1024


def default_intrinsics(camera_count: int = 4) -> list[CameraModel]:
    """Wide-FOV fisheye models with mild distortion; synthetic values only."""
    models = []
    for i in range(camera_count):
        models.append(
            CameraModel(
                camera_id=f"cam{i}",
                fx=270.0 + 2.0 * i,
                fy=271.0 + 1.5 * i,
                cx=639.5 + 0.8 * i,
                cy=511.5 - 0.6 * i,
                width=_IMAGE_W,
                height=_IMAGE_H,
                k1=0.011 + 0.001 * i,
                k2=-0.0042,
                k3=0.0017,
                k4=-2.5e-4,
                k5=3.0e-5,
                k6=-1.5e-6,
                p1=3.0e-4,
                p2=-2.0e-4,
            )
        )
    return models


def default_extrinsics(camera_count: int = 4) -> dict[str, RigidTransform]:
    """Headset-like rig: cameras near the origin, tilted into a shared volume."""
    positions = [
        (-0.08, -0.05, 0.0),
        (0.08, -0.05, 0.0),
        (-0.08, 0.05, 0.01),
        (0.08, 0.05, 0.01),
    ]
    tilts_deg = [(-10.0, -7.0), (10.0, -7.0), (-10.0, 7.0), (10.0, 7.0)]
    out = {}
    for i in range(camera_count):
        yaw, pitch = tilts_deg[i % 4]
        rot = so3_exp(np.array([0.0, math.radians(yaw), 0.0])) @ so3_exp(
            np.array([math.radians(pitch), 0.0, 0.0])
        )
        pose = RigidTransform(rot, np.array(positions[i % 4]))
        out[f"cam{i}"] = pose.inverse()
    return out


def default_board_to_marker() -> RigidTransform:
    return RigidTransform(
        so3_exp(np.array([0.4, -0.3, 0.5])), np.array([0.03, -0.02, 0.015])
    )


@dataclass(frozen=True)
class TrajectoryConfig:
    waypoint_count: int = 8
    center: tuple[float, float, float] = (0.0, 0.0, 1.4)
    half_extent: tuple[float, float, float] = (0.35, 0.25, 0.4)
    max_tilt_deg: float = 35.0
    max_roll_deg: float = 60.0
    min_visible_fraction: float = 0.5


@dataclass(frozen=True)
class SceneSpec:
    camera_count: int = 4
    frame_count: int = 200
    board: BoardGeometry = field(default_factory=make_grid_board)
    true_x: RigidTransform = field(default_factory=default_board_to_marker)
    true_extrinsics: dict[str, RigidTransform] | None = None
    true_intrinsics: list[CameraModel] | None = None
    pixel_noise_sigma: float = 0.0
    mocap_rotation_noise: float = 0.0
    mocap_translation_noise: float = 0.0
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    platform_motion: bool = False
    lollypop_size: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if min(
            self.pixel_noise_sigma,
            self.mocap_rotation_noise,
            self.mocap_translation_noise,
        ) < 0.0:
            raise InvalidArgument("noise magnitudes must be non-negative")

    def resolved_intrinsics(self) -> list[CameraModel]:
        return (
            list(self.true_intrinsics)
            if self.true_intrinsics is not None
            else default_intrinsics(self.camera_count)
        )

    def resolved_extrinsics(self) -> dict[str, RigidTransform]:
        return (
            dict(self.true_extrinsics)
            if self.true_extrinsics is not None
            else default_extrinsics(self.camera_count)
        )


@dataclass(frozen=True)
class SyntheticScene:
    dataset: CalibrationDataset
    lollypop_recording: list
    ground_truth: ChainEstimate


def make_scene_spec(
    seed: int,
    camera_count: int = 4,
    frame_count: int = 200,
    pixel_noise_sigma: float = 0.0,
    board: BoardGeometry | None = None,
    randomize_x: bool = True,
    **kwargs,
) -> SceneSpec:
    """SceneSpec with a seed-derived random board-to-marker transform."""
    if board is None:
        board = make_grid_board()
    true_x = default_board_to_marker()
    if randomize_x:
        rng = np.random.default_rng([seed, 77])
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0.0, math.pi)
        translation = rng.uniform(-0.05, 0.05, size=3)
        true_x = RigidTransform(so3_exp(axis * angle), translation)
    return SceneSpec(
        camera_count=camera_count,
        frame_count=frame_count,
        board=board,
        true_x=true_x,
        pixel_noise_sigma=pixel_noise_sigma,
        seed=seed,
        **kwargs,
    )


# ---------------------------------------------------------------------------
# Smooth trajectories: Catmull-Rom positions, slerp orientations.


def _catmull_rom(waypoints: np.ndarray, samples: int) -> np.ndarray:
    """Interpolate (k, 3) waypoints at `samples` parameters, endpoints clamped."""
    k = waypoints.shape[0]
    padded = np.vstack([waypoints[0], waypoints, waypoints[-1]])
    ts = np.linspace(0.0, k - 1.0, samples)
    out = np.empty((samples, 3))
    for i, t in enumerate(ts):
        seg = min(int(t), k - 2)
        u = t - seg
        p0, p1, p2, p3 = padded[seg], padded[seg + 1], padded[seg + 2], padded[seg + 3]
        out[i] = 0.5 * (
            (2.0 * p1)
            + (-p0 + p2) * u
            + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u
            + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u * u * u
        )
    return out


def _matrix_to_quaternion(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) for a rotation matrix."""
    m = rot
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    return q / np.linalg.norm(q)


def _slerp(qa: np.ndarray, qb: np.ndarray, u: float) -> np.ndarray:
    dot = float(qa @ qb)
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 0.9995:
        q = qa + u * (qb - qa)
        return q / np.linalg.norm(q)
    theta = math.acos(min(1.0, dot))
    return (math.sin((1.0 - u) * theta) * qa + math.sin(u * theta) * qb) / math.sin(theta)


def _orientation_track(rots: list[np.ndarray], samples: int) -> np.ndarray:
    quats = [_matrix_to_quaternion(r) for r in rots]
    k = len(quats)
    ts = np.linspace(0.0, k - 1.0, samples)
    out = np.empty((samples, 3, 3))
    for i, t in enumerate(ts):
        seg = min(int(t), k - 2)
        u = t - seg
        out[i] = quaternion_to_matrix(_slerp(quats[seg], quats[seg + 1], u))
    return out


def _facing_rotation() -> np.ndarray:
    """Board frame orientation whose printed face (+z) looks back at the rig."""
    return so3_exp(np.array([math.pi, 0.0, 0.0]))


def _sample_device_trajectory(
    rng: np.random.Generator, cfg: TrajectoryConfig, samples: int
) -> list[RigidTransform]:
    center = np.array(cfg.center)
    half = np.array(cfg.half_extent)
    waypoints = center + rng.uniform(-1.0, 1.0, size=(cfg.waypoint_count, 3)) * half
    rots = []
    for _ in range(cfg.waypoint_count):
        axis = rng.normal(size=3)
        axis[2] = 0.0
        norm = np.linalg.norm(axis)
        axis = axis / norm if norm > 1e-12 else np.array([1.0, 0.0, 0.0])
        tilt = rng.uniform(0.0, math.radians(cfg.max_tilt_deg))
        roll = rng.uniform(-math.radians(cfg.max_roll_deg), math.radians(cfg.max_roll_deg))
        rot = so3_exp(axis * tilt) @ _facing_rotation() @ so3_exp(np.array([0, 0, roll]))
        rots.append(rot)
    positions = _catmull_rom(waypoints, samples)
    orientations = _orientation_track(rots, samples)
    return [RigidTransform(orientations[i], positions[i]) for i in range(samples)]


def _platform_track(rng: np.random.Generator, samples: int) -> list[RigidTransform]:
    """Small wobble of the camera platform around the identity."""
    poses = []
    for i in range(samples):
        phase = 2.0 * math.pi * i / max(samples, 1)
        omega = 0.02 * np.array([math.sin(phase), math.cos(phase), 0.3 * math.sin(2 * phase)])
        tr = 0.01 * np.array([math.cos(phase), math.sin(phase), 0.5 * math.cos(2 * phase)])
        poses.append(RigidTransform(so3_exp(omega), tr))
    return poses


# ---------------------------------------------------------------------------
# Scene generation.


def _visible_pixels(
    cam_from_world: RigidTransform, world_pts: np.ndarray, model: CameraModel
):
    pixels, valid = project_points_masked(cam_from_world.apply(world_pts), model)
    inside = (
        valid
        & (pixels[:, 0] >= 0.0)
        & (pixels[:, 0] < model.width)
        & (pixels[:, 1] >= 0.0)
        & (pixels[:, 1] < model.height)
    )
    return pixels, inside


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Render a full synthetic calibration scene from a known chain.

    Observations are ground-truth projections with optional Gaussian pixel
    noise; corners projecting outside the image or beyond the field of view
    are dropped. The reported mocap poses optionally carry their own noise
    while the detections always come from the true geometry.
    """
    rng = np.random.default_rng(spec.seed)
    intrinsics = spec.resolved_intrinsics()
    extrinsics = spec.resolved_extrinsics()
    cam_ids = sorted(extrinsics)
    truth = ChainEstimate(
        spec.true_x, extrinsics, {m.camera_id: m for m in intrinsics}
    )
    models = {m.camera_id: m for m in intrinsics}
    corners = spec.board.corners
    n_corners = corners.shape[0]
    need = max(4, n_corners // 2)

    platform = (
        _platform_track(rng, spec.frame_count) if spec.platform_motion else None
    )
    board_poses = None
    pixel_cache: dict[str, list] = {}
    for _ in range(100):
        candidate = _sample_device_trajectory(rng, spec.trajectory, spec.frame_count)
        cache = {}
        ok = True
        for cam_id in cam_ids:
            visible_frames = 0
            per_frame = []
            for f in range(spec.frame_count):
                cam_pose = camera_from_world(
                    extrinsics[cam_id], platform[f] if platform else None
                )
                world_pts = candidate[f].apply(corners)
                pixels, inside = _visible_pixels(cam_pose, world_pts, models[cam_id])
                per_frame.append((pixels, inside))
                if int(inside.sum()) >= need:
                    visible_frames += 1
            cache[cam_id] = per_frame
            if visible_frames < spec.trajectory.min_visible_fraction * spec.frame_count:
                ok = False
                break
        if ok:
            board_poses = candidate
            pixel_cache = cache
            break
    if board_poses is None:
        raise InfeasibleTrajectory(
            "no trajectory kept the board visible often enough in 100 attempts"
        )

    observations: list[Observation] = []
    for cam_id in cam_ids:
        for f in range(spec.frame_count):
            pixels, inside = pixel_cache[cam_id][f]
            idx = np.flatnonzero(inside)
            if idx.size == 0:
                continue
            pts = pixels[idx]
            if spec.pixel_noise_sigma > 0.0:
                pts = pts + rng.normal(0.0, spec.pixel_noise_sigma, size=pts.shape)
            for j, row in zip(idx, pts):
                observations.append(
                    Observation(
                        cam_id,
                        f,
                        int(spec.board.corner_ids[j]),
                        PixelPoint(float(row[0]), float(row[1])),
                    )
                )

    x_inv = spec.true_x.inverse()
    frames = []
    for f in range(spec.frame_count):
        a_true = board_poses[f].compose(x_inv)
        if spec.mocap_rotation_noise > 0.0 or spec.mocap_translation_noise > 0.0:
            omega = rng.normal(0.0, 1.0, size=3)
            omega *= spec.mocap_rotation_noise / max(np.linalg.norm(omega), 1e-30)
            tau = rng.normal(0.0, 1.0, size=3)
            tau *= spec.mocap_translation_noise / max(np.linalg.norm(tau), 1e-30)
            a_report = se3_exp(Twist(omega, tau)).compose(a_true)
        else:
            a_report = a_true
        frames.append(
            MocapFrame(
                frame_id=f,
                time=f / 30.0,
                board_pose=a_report,
                platform_pose=platform[f] if platform else None,
            )
        )

    dataset = CalibrationDataset(frames, observations, spec.board, intrinsics)
    recording = generate_lollypop(spec, truth)
    return SyntheticScene(dataset, recording, truth)


def generate_lollypop(spec: SceneSpec, estimate_truth: ChainEstimate) -> list:
    """Verification recording for the scene's ground-truth chain.

    The synthetic device is a square fiducial whose center coincides with
    the tracked centroid; frames carry noisy corner pixels and exact
    centroid positions.
    """
    from .verify import LollypopFrame  # local import to avoid a module cycle

    rng = np.random.default_rng([spec.seed, 1])
    cam_ids = sorted(estimate_truth.extrinsics)
    half = spec.lollypop_size / 2.0
    corners_local = np.array(
        [[-half, half, 0.0], [half, half, 0.0], [half, -half, 0.0], [-half, -half, 0.0]]
    )
    cfg = replace(spec.trajectory, max_tilt_deg=min(spec.trajectory.max_tilt_deg, 30.0))
    platform = (
        _platform_track(rng, spec.frame_count) if spec.platform_motion else None
    )
    poses = _sample_device_trajectory(rng, cfg, spec.frame_count)
    frames: list[LollypopFrame] = []
    for f in range(spec.frame_count):
        world_corners = poses[f].apply(corners_local)
        centroid = poses[f].translation
        for cam_id in cam_ids:
            model = estimate_truth.intrinsics[cam_id]
            cam_pose = camera_from_world(
                estimate_truth.extrinsics[cam_id], platform[f] if platform else None
            )
            pixels, inside = _visible_pixels(cam_pose, world_corners, model)
            center_px, center_ok = _visible_pixels(
                cam_pose, centroid.reshape(1, 3), model
            )
            if not (inside.all() and center_ok.all()):
                continue
            if spec.pixel_noise_sigma > 0.0:
                pixels = pixels + rng.normal(0.0, spec.pixel_noise_sigma, size=pixels.shape)
            frames.append(
                LollypopFrame(
                    frame_id=f,
                    camera_id=cam_id,
                    aruco_corners=tuple(
                        PixelPoint(float(u), float(v)) for u, v in pixels
                    ),
                    mocap_centroid=centroid,
                    platform_pose=platform[f] if platform else None,
                )
            )
    return frames


def lollypop_sweep(
    model: CameraModel,
    extrinsic: RigidTransform,
    camera_id: str,
    thetas: np.ndarray,
    azimuths: np.ndarray,
    depth: float = 1.0,
    size: float = 0.1,
    pixel_noise_sigma: float = 0.0,
    seed: int = 0,
) -> list:
    """Verification frames whose centers sweep the field of view of one camera.

    Device centers are placed along the rays at the given polar angles and
    azimuths, at the given camera-frame depth, facing the camera. Used to
    probe spatial error structure across the image.
    """
    from .verify import LollypopFrame

    rng = np.random.default_rng(seed)
    half = size / 2.0
    corners_local = np.array(
        [[-half, half, 0.0], [half, half, 0.0], [half, -half, 0.0], [-half, -half, 0.0]]
    )
    world_from_cam = extrinsic.inverse()
    frames = []
    fid = 0
    for theta in np.atleast_1d(thetas):
        for az in np.atleast_1d(azimuths):
            direction = np.array(
                [math.sin(theta) * math.cos(az), math.sin(theta) * math.sin(az), math.cos(theta)]
            )
            center_cam = direction * (depth / max(direction[2], 1e-9))
            # Face the device toward the camera along the viewing ray.
            z_axis = -direction
            up = np.array([0.0, 1.0, 0.0])
            if abs(z_axis @ up) > 0.99:
                up = np.array([1.0, 0.0, 0.0])
            x_axis = np.cross(up, z_axis)
            x_axis /= np.linalg.norm(x_axis)
            y_axis = np.cross(z_axis, x_axis)
            rot_cam = np.column_stack([x_axis, y_axis, z_axis])
            device_cam = RigidTransform(rot_cam, center_cam)
            device_world = world_from_cam.compose(device_cam)
            world_corners = device_world.apply(corners_local)
            pixels, inside = _visible_pixels(extrinsic, world_corners, model)
            if not inside.all():
                continue
            if pixel_noise_sigma > 0.0:
                pixels = pixels + rng.normal(0.0, pixel_noise_sigma, size=pixels.shape)
            frames.append(
                LollypopFrame(
                    frame_id=fid,
                    camera_id=camera_id,
                    aruco_corners=tuple(PixelPoint(float(u), float(v)) for u, v in pixels),
                    mocap_centroid=device_world.translation,
                )
            )
            fid += 1
    return frames


def perturb_estimate(
    truth: ChainEstimate,
    rotation_err: float,
    translation_err: float,
    which: str = "all",
    seed: int = 0,
) -> ChainEstimate:
    """Apply a random fixed-magnitude perturbation to selected transforms.

    `which` is "x", "extrinsics", "all", or a specific camera id. Each
    selected transform gets a rotation of exactly rotation_err radians about
    a random unit axis and a translation of exactly translation_err meters
    in a random unit direction, left-multiplied. Deterministic given seed.
    """
    if rotation_err < 0.0 or translation_err < 0.0:
        raise InvalidArgument("perturbation magnitudes must be non-negative")
    rng = np.random.default_rng(seed)

    def bump(t: RigidTransform) -> RigidTransform:
        axis = rng.normal(size=3)
        axis /= max(np.linalg.norm(axis), 1e-30)
        direction = rng.normal(size=3)
        direction /= max(np.linalg.norm(direction), 1e-30)
        step = se3_exp(Twist(axis * rotation_err, direction * translation_err))
        return step.compose(t)

    x = truth.board_to_marker
    extrinsics = dict(truth.extrinsics)
    if which == "x":
        x = bump(x)
    elif which == "extrinsics":
        for cam_id in sorted(extrinsics):
            extrinsics[cam_id] = bump(extrinsics[cam_id])
    elif which == "all":
        x = bump(x)
        for cam_id in sorted(extrinsics):
            extrinsics[cam_id] = bump(extrinsics[cam_id])
    elif which in extrinsics:
        extrinsics[which] = bump(extrinsics[which])
    else:
        raise InvalidArgument(f"unknown perturbation selector {which!r}")
    return ChainEstimate(x, extrinsics, dict(truth.intrinsics))
