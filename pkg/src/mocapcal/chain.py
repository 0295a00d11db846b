"""Kinematic-chain prediction and residuals.

A board corner p in the printed-pattern frame reaches camera c at frame t as

    pixel = project( Y_c * P(t)^-1 * A(t) * X * p )

where X is the board-to-marker transform shared by all cameras and frames,
A(t) is the mocap-reported board rigid body pose, P(t) is the optional
platform (headset) rigid body pose, and Y_c is the camera extrinsic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import (
    INTRINSIC_COUNT,
    CameraModel,
    PixelPoint,
    project,
    project_points,
    project_with_jacobians_points,
)
from .errors import EmptyDataset, InvalidArgument, ValidationError
from .geometry import RigidTransform, skew, skew_many


@dataclass(frozen=True, eq=False)
class BoardGeometry:
    """Known 3D corner layout of the calibration pattern, in board frame."""

    corner_ids: np.ndarray
    corners: np.ndarray
    board_id: str = "board"

    def __post_init__(self) -> None:
        ids = np.array(self.corner_ids, dtype=np.int64)
        pts = np.array(self.corners, dtype=np.float64)
        if pts.shape != (ids.shape[0], 3):
            raise InvalidArgument("corner_ids and corners must align")
        if len(set(ids.tolist())) != ids.shape[0]:
            raise InvalidArgument("corner ids must be unique")
        ids.setflags(write=False)
        pts.setflags(write=False)
        object.__setattr__(self, "corner_ids", ids)
        object.__setattr__(self, "corners", pts)
        object.__setattr__(self, "_index", {int(c): i for i, c in enumerate(ids)})

    def corner_position(self, corner_id: int) -> np.ndarray:
        try:
            return self.corners[self._index[int(corner_id)]]
        except KeyError:
            raise InvalidArgument(f"unknown corner id {corner_id}") from None

    def has_corner(self, corner_id: int) -> bool:
        return int(corner_id) in self._index

    def __len__(self) -> int:
        return self.corner_ids.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BoardGeometry):
            return NotImplemented
        return (
            self.board_id == other.board_id
            and np.array_equal(self.corner_ids, other.corner_ids)
            and np.array_equal(self.corners, other.corners)
        )


def make_grid_board(
    markers_x: int = 6,
    markers_y: int = 4,
    marker_side: float = 0.059,
    spacing: float = 0.0295,
    board_id: str = "board",
) -> BoardGeometry:
    """Planar grid of square fiducial markers, centered on the board origin.

    Each marker contributes its four outer corners (top-left, top-right,
    bottom-right, bottom-left in board coordinates with +y up), with ids
    4*marker_index + corner_index. All corners lie in the z = 0 plane.
    """
    pitch = marker_side + spacing
    total_w = markers_x * marker_side + (markers_x - 1) * spacing
    total_h = markers_y * marker_side + (markers_y - 1) * spacing
    ids = []
    pts = []
    marker = 0
    for row in range(markers_y):
        for col in range(markers_x):
            x0 = -0.5 * total_w + col * pitch
            y0 = 0.5 * total_h - row * pitch
            corners = [
                (x0, y0),
                (x0 + marker_side, y0),
                (x0 + marker_side, y0 - marker_side),
                (x0, y0 - marker_side),
            ]
            for k, (x, y) in enumerate(corners):
                ids.append(4 * marker + k)
                pts.append((x, y, 0.0))
            marker += 1
    return BoardGeometry(np.array(ids), np.array(pts), board_id)


@dataclass(frozen=True)
class MocapFrame:
    """Mocap-reported rigid body poses at one time sample."""

    frame_id: int
    time: float
    board_pose: RigidTransform | None
    platform_pose: RigidTransform | None = None


@dataclass(frozen=True)
class Observation:
    """One detected 2D board corner."""

    camera_id: str
    frame_id: int
    corner_id: int
    pixel: PixelPoint


@dataclass(frozen=True, eq=False)
class ChainEstimate:
    """Current values of the chain unknowns."""

    board_to_marker: RigidTransform
    extrinsics: dict[str, RigidTransform]
    intrinsics: dict[str, CameraModel]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ChainEstimate):
            return NotImplemented
        return (
            self.board_to_marker == other.board_to_marker
            and self.extrinsics == other.extrinsics
            and self.intrinsics == other.intrinsics
        )


@dataclass
class CalibrationDataset:
    """Frames, detections, board layout, and initial camera models."""

    frames: list[MocapFrame]
    observations: list[Observation]
    board: BoardGeometry
    cameras: list[CameraModel]

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        frame_ids = [f.frame_id for f in self.frames]
        if sorted(frame_ids) != frame_ids or len(set(frame_ids)) != len(frame_ids):
            raise ValidationError("frame ids must be strictly increasing")
        cam_ids = {c.camera_id for c in self.cameras}
        if len(cam_ids) != len(self.cameras):
            raise ValidationError("camera ids must be unique")
        frames = set(frame_ids)
        seen = set()
        for obs in self.observations:
            if obs.frame_id not in frames:
                raise ValidationError(
                    f"observation references missing frame_id {obs.frame_id}"
                )
            if obs.camera_id not in cam_ids:
                raise ValidationError(
                    f"observation references missing camera_id {obs.camera_id}"
                )
            if not self.board.has_corner(obs.corner_id):
                raise ValidationError(
                    f"observation references missing corner_id {obs.corner_id}"
                )
            key = (obs.camera_id, obs.frame_id, obs.corner_id)
            if key in seen:
                raise ValidationError(f"duplicate observation {key}")
            seen.add(key)

    def camera_ids(self) -> list[str]:
        return sorted(c.camera_id for c in self.cameras)

    def camera_model(self, camera_id: str) -> CameraModel:
        for cam in self.cameras:
            if cam.camera_id == camera_id:
                return cam
        raise InvalidArgument(f"unknown camera {camera_id}")

    def frame_by_id(self, frame_id: int) -> MocapFrame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise InvalidArgument(f"unknown frame {frame_id}")


@dataclass(frozen=True)
class RegularizationConfig:
    """Intrinsic prior term: strength * sum_j W_j (theta_j - prior_j)^2.

    W puts weight on principal-point deviation and on the distortion
    coefficients; focal lengths are left unregularized. prior_mode selects
    the prior vector: "factory" anchors every parameter at the dataset's
    initial camera model, "nominal" anchors the principal point at the image
    center and the distortion coefficients at zero.
    """

    strength: float = 1.0
    principal_point_weight: float = 1e-2
    distortion_weight: float = 1e2
    focal_weight: float = 0.0
    prior_mode: str = "factory"

    def __post_init__(self) -> None:
        if self.prior_mode not in ("factory", "nominal"):
            raise InvalidArgument("prior_mode must be 'factory' or 'nominal'")

    def weights(self) -> np.ndarray:
        w = np.empty(INTRINSIC_COUNT)
        w[0:2] = self.focal_weight
        w[2:4] = self.principal_point_weight
        w[4:12] = self.distortion_weight
        return w

    def prior_vector(self, factory: CameraModel) -> np.ndarray:
        if self.prior_mode == "factory":
            return factory.intrinsics_vector
        prior = factory.intrinsics_vector.copy()
        prior[2] = (factory.width - 1) / 2.0
        prior[3] = (factory.height - 1) / 2.0
        prior[4:12] = 0.0
        return prior


def camera_from_world(
    extrinsic: RigidTransform, platform_pose: RigidTransform | None
) -> RigidTransform:
    """World-to-camera map, routing through the platform body when present."""
    if platform_pose is None:
        return extrinsic
    return extrinsic.compose(platform_pose.inverse())


def _require_board_pose(frame: MocapFrame) -> RigidTransform:
    if frame.board_pose is None:
        raise InvalidArgument(f"frame {frame.frame_id} has no board pose")
    return frame.board_pose


def predict_pixel(
    estimate: ChainEstimate,
    frame: MocapFrame,
    board: BoardGeometry,
    camera_id: str,
    corner_id: int,
) -> PixelPoint:
    """Pixel predicted by the full chain for one corner."""
    p_local = board.corner_position(corner_id)
    world = _require_board_pose(frame).apply(estimate.board_to_marker.apply(p_local))
    cam = camera_from_world(estimate.extrinsics[camera_id], frame.platform_pose)
    return project(cam.apply(world), estimate.intrinsics[camera_id])


def residual(
    estimate: ChainEstimate,
    frame: MocapFrame,
    board: BoardGeometry,
    observation: Observation,
) -> np.ndarray:
    """Predicted minus detected pixel, shape (2,)."""
    pred = predict_pixel(estimate, frame, board, observation.camera_id, observation.corner_id)
    return pred.as_array() - observation.pixel.as_array()


def chain_jacobian(
    estimate: ChainEstimate,
    frame: MocapFrame,
    board: BoardGeometry,
    observation: Observation,
) -> np.ndarray:
    """Analytic residual Jacobian, shape (2, 24).

    Columns: left-multiplied twist of the camera extrinsic (rotation 0:3,
    translation 3:6), left-multiplied twist of the board-to-marker transform
    (6:9, 9:12), then the 12 intrinsic parameters (12:24).
    """
    p_local = board.corner_position(observation.corner_id)
    x = estimate.board_to_marker
    b = x.apply(p_local)
    m = camera_from_world(RigidTransform.identity(), frame.platform_pose).compose(
        _require_board_pose(frame)
    )
    y = estimate.extrinsics[observation.camera_id]
    g = m.apply(b)
    s = y.apply(g)
    model = estimate.intrinsics[observation.camera_id]
    _, j_point, j_intr = project_with_jacobians_points(s.reshape(1, 3), model)
    jp = j_point[0]
    out = np.zeros((2, 24))
    out[:, 0:3] = jp @ (-skew(s))
    out[:, 3:6] = jp
    w_rot = y.rotation @ m.rotation
    out[:, 6:9] = jp @ w_rot @ (-skew(b))
    out[:, 9:12] = jp @ w_rot
    out[:, 12:24] = j_intr[0]
    return out


# ---------------------------------------------------------------------------
# Compiled (array) view used by the solver and the bulk objectives.


@dataclass
class CompiledCamera:
    camera_id: str
    model: CameraModel
    frame_rows: np.ndarray  # (n,) indices into the compiled frame arrays
    corner_ids: np.ndarray  # (n,)
    points_local: np.ndarray  # (n, 3)
    pixels: np.ndarray  # (n, 2) detected corners


@dataclass
class CompiledDataset:
    board: BoardGeometry
    frame_ids: np.ndarray  # (F,)
    chain_rot: np.ndarray  # (F, 3, 3)  rotation of P^-1 * A per frame
    chain_tr: np.ndarray  # (F, 3)
    board_rot: np.ndarray  # (F, 3, 3)  rotation of A alone (orientation guard)
    cameras: list[CompiledCamera] = field(default_factory=list)

    def camera(self, camera_id: str) -> CompiledCamera:
        for cam in self.cameras:
            if cam.camera_id == camera_id:
                return cam
        raise InvalidArgument(f"unknown camera {camera_id}")

    @property
    def observation_count(self) -> int:
        return sum(c.pixels.shape[0] for c in self.cameras)


def compile_dataset(dataset: CalibrationDataset) -> CompiledDataset:
    """Array view of a dataset; frames without a board pose are dropped."""
    usable = [f for f in dataset.frames if f.board_pose is not None]
    frame_ids = np.array([f.frame_id for f in usable], dtype=np.int64)
    row_of = {f.frame_id: i for i, f in enumerate(usable)}
    n = len(usable)
    chain_rot = np.empty((n, 3, 3))
    chain_tr = np.empty((n, 3))
    board_rot = np.empty((n, 3, 3))
    for i, f in enumerate(usable):
        m = camera_from_world(RigidTransform.identity(), f.platform_pose).compose(
            f.board_pose
        )
        chain_rot[i] = m.rotation
        chain_tr[i] = m.translation
        board_rot[i] = f.board_pose.rotation
    compiled = CompiledDataset(dataset.board, frame_ids, chain_rot, chain_tr, board_rot)
    by_camera: dict[str, list[Observation]] = {c: [] for c in dataset.camera_ids()}
    for obs in dataset.observations:
        if obs.frame_id in row_of:
            by_camera[obs.camera_id].append(obs)
    for cam_id in dataset.camera_ids():
        obs_list = by_camera[cam_id]
        rows = np.array([row_of[o.frame_id] for o in obs_list], dtype=np.int64)
        cids = np.array([o.corner_id for o in obs_list], dtype=np.int64)
        pts = (
            np.stack([dataset.board.corner_position(c) for c in cids])
            if obs_list
            else np.zeros((0, 3))
        )
        pix = (
            np.array([[o.pixel.u, o.pixel.v] for o in obs_list])
            if obs_list
            else np.zeros((0, 2))
        )
        compiled.cameras.append(
            CompiledCamera(cam_id, dataset.camera_model(cam_id), rows, cids, pts, pix)
        )
    return compiled


def camera_frame_points(
    compiled: CompiledDataset, estimate: ChainEstimate, cam: CompiledCamera
) -> np.ndarray:
    """Chain-transformed corner positions in the camera frame, (n, 3)."""
    x = estimate.board_to_marker
    y = estimate.extrinsics[cam.camera_id]
    b = cam.points_local @ x.rotation.T + x.translation
    rot = compiled.chain_rot[cam.frame_rows]
    g = np.einsum("nij,nj->ni", rot, b) + compiled.chain_tr[cam.frame_rows]
    return g @ y.rotation.T + y.translation


def residual_vectors(
    compiled: CompiledDataset, estimate: ChainEstimate
) -> dict[str, np.ndarray]:
    """Per-camera (n, 2) residual arrays: predicted minus detected."""
    out = {}
    for cam in compiled.cameras:
        if cam.pixels.shape[0] == 0:
            out[cam.camera_id] = np.zeros((0, 2))
            continue
        s = camera_frame_points(compiled, estimate, cam)
        pred = project_points(s, estimate.intrinsics[cam.camera_id])
        out[cam.camera_id] = pred - cam.pixels
    return out


def objective_2d(
    estimate: ChainEstimate,
    dataset: CalibrationDataset,
    reg: RegularizationConfig | None = None,
) -> float:
    """Sum of squared pixel residuals plus the intrinsic prior term."""
    compiled = compile_dataset(dataset)
    total = 0.0
    for r in residual_vectors(compiled, estimate).values():
        total += float(np.sum(r * r))
    if reg is not None and reg.strength != 0.0:
        w = reg.weights()
        for factory in dataset.cameras:
            current = estimate.intrinsics[factory.camera_id].intrinsics_vector
            dev = current - reg.prior_vector(factory)
            total += reg.strength * float(np.sum(w * dev * dev))
    return total


def objective_3d(
    estimate: ChainEstimate,
    dataset: CalibrationDataset,
    references: dict[tuple[str, int, int], np.ndarray],
) -> float:
    """Squared 3D mismatch between chain-transformed corners and references.

    Well-defined for any transform configuration; no projection involved.
    """
    compiled = compile_dataset(dataset)
    total = 0.0
    for cam in compiled.cameras:
        mask = np.array(
            [
                (cam.camera_id, int(compiled.frame_ids[r]), int(c)) in references
                for r, c in zip(cam.frame_rows, cam.corner_ids)
            ],
            dtype=bool,
        )
        if not mask.any():
            continue
        s = camera_frame_points(compiled, estimate, cam)[mask]
        refs = np.stack(
            [
                references[(cam.camera_id, int(compiled.frame_ids[r]), int(c))]
                for r, c in zip(cam.frame_rows[mask], cam.corner_ids[mask])
            ]
        )
        d = s - refs
        total += float(np.sum(d * d))
    return total


def board_rmse(estimate: ChainEstimate, dataset: CalibrationDataset) -> float:
    """Pooled per-point root-mean-square reprojection error, in pixels."""
    compiled = compile_dataset(dataset)
    n = compiled.observation_count
    if n == 0:
        raise EmptyDataset("no observations")
    total = 0.0
    for r in residual_vectors(compiled, estimate).values():
        total += float(np.sum(r * r))
    return float(np.sqrt(total / n))


def per_camera_rmse(
    estimate: ChainEstimate, dataset: CalibrationDataset
) -> dict[str, float]:
    """Board RMSE split by camera; cameras without observations map to nan."""
    compiled = compile_dataset(dataset)
    out = {}
    for cam_id, r in residual_vectors(compiled, estimate).items():
        n = r.shape[0]
        out[cam_id] = float(np.sqrt(np.sum(r * r) / n)) if n else float("nan")
    return out


def chain_jacobian_blocks(
    compiled: CompiledDataset, estimate: ChainEstimate, cam: CompiledCamera
):
    """Batched residual Jacobian blocks for one camera.

    Returns (residuals (n,2), j_y (n,2,6), j_x (n,2,6), j_intr (n,2,12)),
    twist columns ordered rotation-then-translation.
    """
    x = estimate.board_to_marker
    y = estimate.extrinsics[cam.camera_id]
    b = cam.points_local @ x.rotation.T + x.translation
    rot = compiled.chain_rot[cam.frame_rows]
    g = np.einsum("nij,nj->ni", rot, b) + compiled.chain_tr[cam.frame_rows]
    s = g @ y.rotation.T + y.translation
    pixels, j_point, j_intr = project_with_jacobians_points(
        s, estimate.intrinsics[cam.camera_id]
    )
    res = pixels - cam.pixels
    n = s.shape[0]
    j_y = np.empty((n, 2, 6))
    j_y[:, :, 0:3] = np.einsum("nij,njk->nik", j_point, -skew_many(s))
    j_y[:, :, 3:6] = j_point
    w_rot = np.einsum("ij,njk->nik", y.rotation, rot)
    jw = np.einsum("nij,njk->nik", j_point, w_rot)
    j_x = np.empty((n, 2, 6))
    j_x[:, :, 0:3] = np.einsum("nij,njk->nik", jw, -skew_many(b))
    j_x[:, :, 3:6] = jw
    return res, j_y, j_x, j_intr
