"""Three-stage calibration pipeline and the damped Gauss-Newton core.

Stage 1 resolves the rotation ambiguity of the board-to-marker transform by
alternating closed-form rigid registrations from a set of well-distributed
candidate rotations, scored on a 3D point-matching objective built from
per-frame PnP bootstraps. Stage 2 jointly refines all rigid transforms on
that 3D objective. Stage 3 minimizes the full 2D reprojection objective,
optionally refining intrinsics. A fixed-X baseline (least squares followed
by Huber-weighted refinement) solves extrinsics only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import camera as cam_mod
from .camera import CameraModel, INTRINSIC_COUNT
from .chain import (
    BoardGeometry,
    CalibrationDataset,
    ChainEstimate,
    CompiledCamera,
    CompiledDataset,
    Observation,
    RegularizationConfig,
    board_rmse,
    camera_frame_points,
    chain_jacobian_blocks,
    compile_dataset,
)
from .errors import (
    BehindCamera,
    DegenerateConfiguration,
    Divergence,
    EmptyReferences,
    InsufficientCorners,
    InvalidArgument,
    NoConvergence,
    PlanarDegeneracy,
    SingularNormalEquations,
)
from .geometry import (
    RigidTransform,
    Twist,
    procrustes_fit,
    rotation_angle,
    sample_candidate_rotations,
    se3_exp,
    skew_many,
)

log = logging.getLogger(__name__)

# Damping schedule for the Levenberg-Marquardt core.
LM_LAMBDA_INIT = 1e-3
LM_LAMBDA_UP = 10.0
LM_LAMBDA_DOWN = 10.0
LM_MAX_REJECTS = 25

# 95%-efficiency constant for the Huber-weighted baseline refinement.
HUBER_DELTA_PX = 1.345


@dataclass(frozen=True)
class SolverOptions:
    candidate_count: int = 30
    pool_size: int = 300
    procrustes_rounds: int = 5
    lm_max_iters: int = 100
    epsilon: float = 1e-4
    optimize_intrinsics: bool = True
    seed: int = 0
    skip_stage1: bool = False
    skip_stage2: bool = False
    skip_stage3: bool = False
    initial_x: RigidTransform | None = None
    min_distinct_orientations: int = 3
    orientation_spread_deg: float = 5.0

    def __post_init__(self) -> None:
        if self.epsilon <= 0.0:
            raise InvalidArgument("epsilon must be positive")
        if not (0 < self.candidate_count <= self.pool_size):
            raise InvalidArgument("need 0 < candidate_count <= pool_size")


@dataclass(frozen=True)
class StageDiagnostics:
    stage: str
    iterations: int
    start_objective: float
    end_objective: float
    selected_candidate: int | None = None
    no_decrease: bool = False
    reason: str = ""


@dataclass(frozen=True)
class CalibrationResult:
    estimate: ChainEstimate
    board_rmse: float
    stage_diagnostics: dict[str, StageDiagnostics]
    converged: bool


@dataclass(frozen=True)
class PnpReferences:
    """Camera-frame corner positions bootstrapped once via per-frame PnP."""

    entries: dict[tuple[str, int, int], np.ndarray]

    def cameras(self) -> list[str]:
        return sorted({key[0] for key in self.entries})

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt core.


@dataclass
class LMDiagnostics:
    iterations: int = 0
    start_objective: float = 0.0
    end_objective: float = 0.0
    accepted_objectives: list[float] = field(default_factory=list)
    converged: bool = False
    no_decrease: bool = False
    reason: str = ""


def lm_minimize(
    system,
    state,
    *,
    max_iters: int = 100,
    epsilon: float = 1e-4,
    reject_exceptions: tuple = (),
):
    """Damped normal-equation minimization with accept/reject steps.

    `system` must provide residuals(state) -> (m,), residuals_and_jacobian(
    state) -> ((m,), (m, p)), and apply_step(state, delta) -> state. Damping
    scales the diagonal of J^T J, multiplied up on reject and down on accept.
    Iteration stops when the improvement between consecutive accepted
    objectives drops below epsilon * (1 + E), where E is the current value.
    Exceptions listed in reject_exceptions cause a trial step to be rejected
    instead of propagating.
    """
    r, jac = system.residuals_and_jacobian(state)
    energy = float(r @ r)
    diag = LMDiagnostics(start_objective=energy, end_objective=energy)
    diag.accepted_objectives.append(energy)
    lam = LM_LAMBDA_INIT
    for it in range(max_iters):
        diag.iterations = it + 1
        jtj = jac.T @ jac
        jtr = jac.T @ r
        scale = np.diag(jtj).copy()
        if not np.all(np.isfinite(scale)) or np.any(scale == 0.0):
            # A parameter with no influence on any residual: rank deficient.
            raise SingularNormalEquations(
                "normal equations have an empty diagonal entry"
            )
        floor = 1e-12 * max(scale.max(), 1.0)
        scale = np.maximum(scale, floor)
        accepted = False
        for _ in range(LM_MAX_REJECTS):
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(scale), -jtr)
            except np.linalg.LinAlgError as exc:
                raise SingularNormalEquations(str(exc)) from exc
            if not np.all(np.isfinite(delta)):
                raise SingularNormalEquations("non-finite step from normal equations")
            try:
                trial = system.apply_step(state, delta)
                r_trial = system.residuals(trial)
            except reject_exceptions:
                lam = min(lam * LM_LAMBDA_UP, 1e14)
                continue
            e_trial = float(r_trial @ r_trial)
            if math.isfinite(e_trial) and e_trial < energy:
                state = trial
                improvement = energy - e_trial
                energy = e_trial
                lam = max(lam / LM_LAMBDA_DOWN, 1e-12)
                accepted = True
                break
            lam = min(lam * LM_LAMBDA_UP, 1e14)
        if not accepted:
            # Damping exhausted without a decrease: numerically stationary.
            diag.converged = True
            diag.no_decrease = True
            diag.reason = "no_decrease"
            break
        diag.accepted_objectives.append(energy)
        if improvement < epsilon * (1.0 + energy):
            diag.converged = True
            diag.reason = "tolerance"
            break
        r, jac = system.residuals_and_jacobian(state)
    else:
        diag.reason = "max_iters"
    diag.end_objective = energy
    return state, diag


# ---------------------------------------------------------------------------
# Planar PnP bootstrap.


def _dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares homography src -> dst (both (n, 2)), Hartley-normalized."""

    def normalizer(pts):
        c = pts.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - c, axis=1)), 1e-12)
        t = np.array([[scale, 0, -scale * c[0]], [0, scale, -scale * c[1]], [0, 0, 1]])
        return t

    t_src = normalizer(src)
    t_dst = normalizer(dst)
    s = (np.column_stack([src, np.ones(len(src))]) @ t_src.T)[:, :2]
    d = (np.column_stack([dst, np.ones(len(dst))]) @ t_dst.T)[:, :2]
    rows = []
    for (sx, sy), (dx, dy) in zip(s, d):
        rows.append([sx, sy, 1, 0, 0, 0, -dx * sx, -dx * sy, -dx])
        rows.append([0, 0, 0, sx, sy, 1, -dy * sx, -dy * sy, -dy])
    a = np.asarray(rows)
    _, sv, vt = np.linalg.svd(a)
    if sv[-2] <= 1e-10 * sv[0]:
        raise PlanarDegeneracy("homography underdetermined; corners collinear")
    h = vt[-1].reshape(3, 3)
    return np.linalg.inv(t_dst) @ h @ t_src


def _plane_basis(points: np.ndarray):
    """Orthonormal basis of the best-fit plane through (n, 3) points."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    if sv[1] <= 1e-10 * max(sv[0], 1e-30):
        raise PlanarDegeneracy("board corners are collinear")
    return centroid, vt[0], vt[1]


class _PoseSystem:
    """Reprojection residuals over a left-multiplied twist of one pose."""

    def __init__(self, points: np.ndarray, pixels: np.ndarray, model: CameraModel):
        self.points = points
        self.pixels = pixels
        self.model = model

    def residuals(self, state: RigidTransform) -> np.ndarray:
        pred = cam_mod.project_points(state.apply(self.points), self.model)
        return (pred - self.pixels).ravel()

    def residuals_and_jacobian(self, state: RigidTransform):
        s = state.apply(self.points)
        pixels, j_point, _ = cam_mod.project_with_jacobians_points(s, self.model)
        res = (pixels - self.pixels).ravel()
        n = s.shape[0]
        jac = np.empty((n, 2, 6))
        jac[:, :, 0:3] = np.einsum("nij,njk->nik", j_point, -skew_many(s))
        jac[:, :, 3:6] = j_point
        return res, jac.reshape(2 * n, 6)

    def apply_step(self, state: RigidTransform, delta: np.ndarray) -> RigidTransform:
        return se3_exp(Twist(delta[0:3], delta[3:6])).compose(state)


def _pnp_pose(
    points_local: np.ndarray, pixels: np.ndarray, model: CameraModel
) -> RigidTransform:
    """Board pose in the camera frame from >= 4 coplanar correspondences."""
    if points_local.shape[0] < 4:
        raise InsufficientCorners(
            f"PnP needs at least 4 corners, got {points_local.shape[0]}"
        )
    rays = cam_mod.unproject_points(pixels, model)
    if np.any(rays[:, 2] <= 1e-9):
        raise NoConvergence("corner ray at or beyond 90 degrees; cannot normalize")
    normalized = rays[:, :2] / rays[:, 2:3]
    centroid, e1, e2 = _plane_basis(points_local)
    centered = points_local - centroid
    plane_uv = np.column_stack([centered @ e1, centered @ e2])
    h = _dlt_homography(plane_uv, normalized)
    # H ~ [r1 r2 t] up to scale for a plane-to-image homography.
    scale = 2.0 / (np.linalg.norm(h[:, 0]) + np.linalg.norm(h[:, 1]))
    if h[2, 2] * scale < 0.0:
        scale = -scale
    r1 = h[:, 0] * scale
    r2 = h[:, 1] * scale
    r3 = np.cross(r1, r2)
    u, _, vt = np.linalg.svd(np.column_stack([r1, r2, r3]))
    rot = u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))]) @ vt
    t = h[:, 2] * scale
    if t[2] < 0.0:
        # Plane behind the camera under this sign choice; flip the scale.
        rot = rot @ np.diag([-1.0, -1.0, 1.0])
        t = -t
    plane_to_cam = RigidTransform(rot, t)
    board_to_plane = RigidTransform(
        np.column_stack([e1, e2, np.cross(e1, e2)]).T,
        -np.column_stack([e1, e2, np.cross(e1, e2)]).T @ centroid,
    )
    init = plane_to_cam.compose(board_to_plane)
    system = _PoseSystem(points_local, pixels, model)
    pose, _ = lm_minimize(
        system, init, max_iters=50, epsilon=1e-12, reject_exceptions=(BehindCamera,)
    )
    return pose


def pnp_board_pose(
    observations: list[Observation], board: BoardGeometry, model: CameraModel
) -> RigidTransform:
    """Per-frame board pose in camera space from one camera's detections."""
    if len(observations) < 4:
        raise InsufficientCorners(f"PnP needs at least 4 corners, got {len(observations)}")
    points = np.stack([board.corner_position(o.corner_id) for o in observations])
    pixels = np.array([[o.pixel.u, o.pixel.v] for o in observations])
    return _pnp_pose(points, pixels, model)


def build_references(dataset: CalibrationDataset) -> PnpReferences:
    """PnP-derived camera-frame corner positions, computed once per frame.

    Camera/frame pairs that fail PnP are skipped, never fabricated.
    """
    compiled = compile_dataset(dataset)
    entries: dict[tuple[str, int, int], np.ndarray] = {}
    skipped_cameras = []
    for cam in compiled.cameras:
        added = 0
        for row in np.unique(cam.frame_rows):
            mask = cam.frame_rows == row
            if int(mask.sum()) < 4:
                continue
            pts = cam.points_local[mask]
            pix = cam.pixels[mask]
            try:
                pose = _pnp_pose(pts, pix, cam.model)
            except (
                InsufficientCorners,
                PlanarDegeneracy,
                NoConvergence,
                BehindCamera,
                SingularNormalEquations,
            ):
                continue
            cam_pts = pose.apply(pts)
            frame_id = int(compiled.frame_ids[row])
            for cid, p in zip(cam.corner_ids[mask], cam_pts):
                entries[(cam.camera_id, frame_id, int(cid))] = p
            added += 1
        if added == 0:
            skipped_cameras.append(cam.camera_id)
    if skipped_cameras:
        log.warning("no usable PnP frames for camera(s): %s", ", ".join(skipped_cameras))
    if not entries:
        raise EmptyReferences("no camera/frame pair admitted a PnP solution")
    return PnpReferences(entries)


# ---------------------------------------------------------------------------
# Reference alignment helpers shared by stages 1 and 2.


@dataclass
class _RefBlock:
    """References for one camera, aligned with compiled observation rows."""

    cam: CompiledCamera
    frame_rows: np.ndarray  # (m,)
    points_local: np.ndarray  # (m, 3)
    refs: np.ndarray  # (m, 3)


def _align_references(
    compiled: CompiledDataset, refs: PnpReferences
) -> list[_RefBlock]:
    blocks = []
    for cam in compiled.cameras:
        keep = []
        ref_pts = []
        for i, (row, cid) in enumerate(zip(cam.frame_rows, cam.corner_ids)):
            key = (cam.camera_id, int(compiled.frame_ids[row]), int(cid))
            if key in refs.entries:
                keep.append(i)
                ref_pts.append(refs.entries[key])
        if keep:
            idx = np.array(keep, dtype=np.int64)
            blocks.append(
                _RefBlock(cam, cam.frame_rows[idx], cam.points_local[idx], np.stack(ref_pts))
            )
    if not blocks:
        raise EmptyReferences("references do not overlap the dataset")
    return blocks


def _marker_frame_points(block: _RefBlock, x: RigidTransform) -> np.ndarray:
    return block.points_local @ x.rotation.T + x.translation


def _world_chain_points(
    compiled: CompiledDataset, block: _RefBlock, x: RigidTransform
) -> np.ndarray:
    b = _marker_frame_points(block, x)
    rot = compiled.chain_rot[block.frame_rows]
    return np.einsum("nij,nj->ni", rot, b) + compiled.chain_tr[block.frame_rows]


def _refs_energy(
    compiled: CompiledDataset,
    blocks: list[_RefBlock],
    x: RigidTransform,
    extrinsics: dict[str, RigidTransform],
) -> float:
    total = 0.0
    for block in blocks:
        y = extrinsics[block.cam.camera_id]
        s = _world_chain_points(compiled, block, x) @ y.rotation.T + y.translation
        d = s - block.refs
        total += float(np.sum(d * d))
    return total


# ---------------------------------------------------------------------------
# Stage 1: random-restart alternating Procrustes.


def stage1_procrustes(
    dataset: CalibrationDataset,
    refs: PnpReferences,
    opts: SolverOptions,
    compiled: CompiledDataset | None = None,
):
    """Closed-form chain initialization; returns (estimate, candidate index).

    For every candidate rotation of the board-to-marker transform, each
    extrinsic is solved in turn by closed-form rigid registration against
    the PnP references, and the board-to-marker transform is solved last
    from correspondences pooled over all cameras and frames, so it cannot
    absorb global rigid motion. The candidate with the lowest 3D error wins.
    """
    if len(refs) == 0:
        raise EmptyReferences("stage 1 needs non-empty references")
    if compiled is None:
        compiled = compile_dataset(dataset)
    blocks = _align_references(compiled, refs)
    candidates = sample_candidate_rotations(opts.candidate_count, opts.pool_size, opts.seed)
    pooled_src = np.concatenate([b.points_local for b in blocks])
    best_energy = math.inf
    best: tuple[RigidTransform, dict[str, RigidTransform]] | None = None
    best_idx = -1
    for idx in range(len(candidates)):
        x = RigidTransform(candidates.rotations[idx], np.zeros(3))
        extrinsics: dict[str, RigidTransform] = {}
        try:
            for _ in range(max(1, opts.procrustes_rounds)):
                for block in blocks:
                    world = _world_chain_points(compiled, block, x)
                    extrinsics[block.cam.camera_id] = procrustes_fit(world, block.refs)
                pooled_dst = []
                for block in blocks:
                    y = extrinsics[block.cam.camera_id]
                    rot_cm = np.einsum(
                        "ij,njk->nik", y.rotation, compiled.chain_rot[block.frame_rows]
                    )
                    t_cm = (
                        compiled.chain_tr[block.frame_rows] @ y.rotation.T + y.translation
                    )
                    pooled_dst.append(
                        np.einsum("nji,nj->ni", rot_cm, block.refs - t_cm)
                    )
                x = procrustes_fit(pooled_src, np.concatenate(pooled_dst))
        except DegenerateConfiguration:
            continue
        energy = _refs_energy(compiled, blocks, x, extrinsics)
        if energy < best_energy:
            best_energy = energy
            best = (x, extrinsics)
            best_idx = idx
    if best is None:
        raise DegenerateConfiguration("every stage-1 candidate was degenerate")
    x, extrinsics = best
    intrinsics = {c.camera_id: c for c in dataset.cameras}
    for cam in compiled.cameras:
        extrinsics.setdefault(cam.camera_id, RigidTransform.identity())
    return ChainEstimate(x, extrinsics, intrinsics), best_idx


# ---------------------------------------------------------------------------
# Stage 2: joint 3D refinement.


class _Refine3DSystem:
    """3D mismatch residuals over the extrinsic twists and the shared X twist."""

    def __init__(self, compiled: CompiledDataset, blocks: list[_RefBlock], cam_ids):
        self.compiled = compiled
        self.blocks = blocks
        self.cam_ids = list(cam_ids)
        self.cam_col = {c: 6 * i for i, c in enumerate(self.cam_ids)}
        self.x_col = 6 * len(self.cam_ids)
        self.n_params = self.x_col + 6
        self.rows = sum(3 * b.refs.shape[0] for b in blocks)

    def _points(self, state: ChainEstimate):
        for block in self.blocks:
            y = state.extrinsics[block.cam.camera_id]
            b = _marker_frame_points(block, state.board_to_marker)
            rot = self.compiled.chain_rot[block.frame_rows]
            g = np.einsum("nij,nj->ni", rot, b) + self.compiled.chain_tr[block.frame_rows]
            s = g @ y.rotation.T + y.translation
            yield block, y, b, rot, s

    def residuals(self, state: ChainEstimate) -> np.ndarray:
        parts = [ (s - block.refs).ravel() for block, _, _, _, s in self._points(state) ]
        return np.concatenate(parts)

    def residuals_and_jacobian(self, state: ChainEstimate):
        res = np.empty(self.rows)
        jac = np.zeros((self.rows, self.n_params))
        row = 0
        eye = np.eye(3)
        for block, y, b, rot, s in self._points(state):
            n = s.shape[0]
            sl = slice(row, row + 3 * n)
            res[sl] = (s - block.refs).ravel()
            col = self.cam_col[block.cam.camera_id]
            j_cam = np.empty((n, 3, 6))
            j_cam[:, :, 0:3] = -skew_many(s)
            j_cam[:, :, 3:6] = eye
            jac[sl, col : col + 6] = j_cam.reshape(3 * n, 6)
            w_rot = np.einsum("ij,njk->nik", y.rotation, rot)
            j_x = np.empty((n, 3, 6))
            j_x[:, :, 0:3] = np.einsum("nij,njk->nik", w_rot, -skew_many(b))
            j_x[:, :, 3:6] = w_rot
            jac[sl, self.x_col : self.x_col + 6] = j_x.reshape(3 * n, 6)
            row += 3 * n
        return res, jac

    def apply_step(self, state: ChainEstimate, delta: np.ndarray) -> ChainEstimate:
        extrinsics = dict(state.extrinsics)
        for cam_id in self.cam_ids:
            col = self.cam_col[cam_id]
            step = se3_exp(Twist(delta[col : col + 3], delta[col + 3 : col + 6]))
            extrinsics[cam_id] = step.compose(state.extrinsics[cam_id])
        xs = se3_exp(Twist(delta[self.x_col : self.x_col + 3], delta[self.x_col + 3 :]))
        return ChainEstimate(
            xs.compose(state.board_to_marker), extrinsics, state.intrinsics
        )


def stage2_refine_3d(
    estimate: ChainEstimate,
    dataset: CalibrationDataset,
    refs: PnpReferences,
    opts: SolverOptions,
    compiled: CompiledDataset | None = None,
):
    """Jointly refine all rigid transforms on the 3D objective.

    Intrinsics are held fixed. Returns (estimate, StageDiagnostics).
    """
    if compiled is None:
        compiled = compile_dataset(dataset)
    blocks = _align_references(compiled, refs)
    cam_ids = sorted({b.cam.camera_id for b in blocks})
    system = _Refine3DSystem(compiled, blocks, cam_ids)
    refined, diag = lm_minimize(
        system, estimate, max_iters=opts.lm_max_iters, epsilon=opts.epsilon
    )
    return refined, StageDiagnostics(
        stage="stage2_3d",
        iterations=diag.iterations,
        start_objective=diag.start_objective,
        end_objective=diag.end_objective,
        no_decrease=diag.no_decrease,
        reason=diag.reason,
    )


# ---------------------------------------------------------------------------
# Stage 3: joint 2D reprojection refinement.


class _Refine2DSystem:
    """Pixel residuals plus intrinsic prior rows.

    Parameters: one 6-DOF twist per camera, a shared 6-DOF twist for the
    board-to-marker transform, then 12 intrinsics per camera when enabled.
    Prior rows are always present so the objective matches the full 2D
    objective value regardless of whether intrinsics are optimized.
    """

    def __init__(
        self,
        compiled: CompiledDataset,
        factory: dict[str, CameraModel],
        reg: RegularizationConfig,
        optimize_intrinsics: bool,
        fixed_x: RigidTransform | None = None,
    ):
        self.compiled = compiled
        self.cameras = [c for c in compiled.cameras if c.pixels.shape[0] > 0]
        self.cam_ids = [c.camera_id for c in self.cameras]
        self.optimize_intrinsics = optimize_intrinsics
        self.fixed_x = fixed_x
        self.cam_col = {c: 6 * i for i, c in enumerate(self.cam_ids)}
        ncams = len(self.cam_ids)
        if fixed_x is None:
            self.x_col = 6 * ncams
            base = self.x_col + 6
        else:
            self.x_col = -1
            base = 6 * ncams
        self.intr_col = {}
        if optimize_intrinsics:
            for i, c in enumerate(self.cam_ids):
                self.intr_col[c] = base + INTRINSIC_COUNT * i
            base += INTRINSIC_COUNT * ncams
        self.n_params = base
        self.obs_rows = sum(2 * c.pixels.shape[0] for c in self.cameras)
        self.rows = self.obs_rows + INTRINSIC_COUNT * ncams
        w = reg.weights()
        self.sqrt_w = np.sqrt(reg.strength * w)
        self.priors = {c: reg.prior_vector(factory[c]) for c in self.cam_ids}

    def _prior_residuals(self, state: ChainEstimate) -> np.ndarray:
        parts = []
        for cam_id in self.cam_ids:
            dev = state.intrinsics[cam_id].intrinsics_vector - self.priors[cam_id]
            parts.append(self.sqrt_w * dev)
        return np.concatenate(parts) if parts else np.zeros(0)

    def residuals(self, state: ChainEstimate) -> np.ndarray:
        parts = []
        for cam in self.cameras:
            s = camera_frame_points(self.compiled, state, cam)
            pred = cam_mod.project_points(s, state.intrinsics[cam.camera_id])
            parts.append((pred - cam.pixels).ravel())
        parts.append(self._prior_residuals(state))
        return np.concatenate(parts)

    def residuals_and_jacobian(self, state: ChainEstimate):
        res = np.empty(self.rows)
        jac = np.zeros((self.rows, self.n_params))
        row = 0
        for cam in self.cameras:
            r, j_y, j_x, j_intr = chain_jacobian_blocks(self.compiled, state, cam)
            n = r.shape[0]
            sl = slice(row, row + 2 * n)
            res[sl] = r.ravel()
            col = self.cam_col[cam.camera_id]
            jac[sl, col : col + 6] = j_y.reshape(2 * n, 6)
            if self.fixed_x is None:
                jac[sl, self.x_col : self.x_col + 6] = j_x.reshape(2 * n, 6)
            if self.optimize_intrinsics:
                ic = self.intr_col[cam.camera_id]
                jac[sl, ic : ic + INTRINSIC_COUNT] = j_intr.reshape(2 * n, INTRINSIC_COUNT)
            row += 2 * n
        prior = self._prior_residuals(state)
        res[row:] = prior
        if self.optimize_intrinsics:
            for i, cam_id in enumerate(self.cam_ids):
                sl = slice(row + INTRINSIC_COUNT * i, row + INTRINSIC_COUNT * (i + 1))
                ic = self.intr_col[cam_id]
                jac[sl, ic : ic + INTRINSIC_COUNT] = np.diag(self.sqrt_w)
        return res, jac

    def apply_step(self, state: ChainEstimate, delta: np.ndarray) -> ChainEstimate:
        extrinsics = dict(state.extrinsics)
        for cam_id in self.cam_ids:
            col = self.cam_col[cam_id]
            step = se3_exp(Twist(delta[col : col + 3], delta[col + 3 : col + 6]))
            extrinsics[cam_id] = step.compose(state.extrinsics[cam_id])
        if self.fixed_x is None:
            xs = se3_exp(
                Twist(delta[self.x_col : self.x_col + 3], delta[self.x_col + 3 : self.x_col + 6])
            )
            x = xs.compose(state.board_to_marker)
        else:
            x = state.board_to_marker
        intrinsics = dict(state.intrinsics)
        if self.optimize_intrinsics:
            for cam_id in self.cam_ids:
                ic = self.intr_col[cam_id]
                vec = state.intrinsics[cam_id].intrinsics_vector + delta[ic : ic + INTRINSIC_COUNT]
                intrinsics[cam_id] = state.intrinsics[cam_id].with_intrinsics(vec)
        return ChainEstimate(x, extrinsics, intrinsics)


def stage3_refine_2d(
    estimate: ChainEstimate,
    dataset: CalibrationDataset,
    opts: SolverOptions,
    reg: RegularizationConfig | None = None,
    compiled: CompiledDataset | None = None,
    extra_diagnostics: dict[str, StageDiagnostics] | None = None,
) -> CalibrationResult:
    """Minimize the full 2D objective; returns the final CalibrationResult."""
    if reg is None:
        reg = RegularizationConfig()
    if compiled is None:
        compiled = compile_dataset(dataset)
    factory = {c.camera_id: c for c in dataset.cameras}
    system = _Refine2DSystem(compiled, factory, reg, opts.optimize_intrinsics)
    refined, diag = lm_minimize(
        system,
        estimate,
        max_iters=opts.lm_max_iters,
        epsilon=opts.epsilon,
        reject_exceptions=(BehindCamera, InvalidArgument),
    )
    if diag.end_objective > 10.0 * diag.start_objective + 1e-12:
        raise Divergence("2D objective grew beyond 10x its initial value")
    diagnostics = dict(extra_diagnostics or {})
    diagnostics["stage3_2d"] = StageDiagnostics(
        stage="stage3_2d",
        iterations=diag.iterations,
        start_objective=diag.start_objective,
        end_objective=diag.end_objective,
        no_decrease=diag.no_decrease,
        reason=diag.reason,
    )
    return CalibrationResult(
        estimate=refined,
        board_rmse=board_rmse(refined, dataset),
        stage_diagnostics=diagnostics,
        converged=diag.converged,
    )


# ---------------------------------------------------------------------------
# Full pipeline.


def _check_orientation_diversity(compiled: CompiledDataset, opts: SolverOptions) -> None:
    """Require enough frames with mutually distinct board orientations."""
    threshold = math.radians(opts.orientation_spread_deg)
    picked: list[np.ndarray] = []
    for rot in compiled.board_rot:
        if all(rotation_angle(rot @ p.T) >= threshold for p in picked):
            picked.append(rot)
            if len(picked) >= opts.min_distinct_orientations:
                return
    raise SingularNormalEquations(
        f"need >= {opts.min_distinct_orientations} frames with board orientations "
        f"differing by >= {opts.orientation_spread_deg} deg; found {len(picked)}"
    )


def _closed_form_extrinsics(
    compiled: CompiledDataset, refs: PnpReferences, x: RigidTransform,
    intrinsics: dict[str, CameraModel],
) -> ChainEstimate:
    """Single per-camera rigid registration pass with X held fixed."""
    blocks = _align_references(compiled, refs)
    extrinsics = {}
    for block in blocks:
        world = _world_chain_points(compiled, block, x)
        extrinsics[block.cam.camera_id] = procrustes_fit(world, block.refs)
    for cam in compiled.cameras:
        extrinsics.setdefault(cam.camera_id, RigidTransform.identity())
    return ChainEstimate(x, extrinsics, intrinsics)


def calibrate(
    dataset: CalibrationDataset,
    opts: SolverOptions | None = None,
    reg: RegularizationConfig | None = None,
) -> CalibrationResult:
    """Run the staged pipeline; stages are individually skippable.

    When stage 1 is skipped, extrinsics are bootstrapped by a single
    closed-form registration pass around the supplied (or identity) initial
    board-to-marker transform.
    """
    opts = opts or SolverOptions()
    reg = reg or RegularizationConfig()
    compiled = compile_dataset(dataset)
    if compiled.observation_count == 0:
        raise EmptyReferences("dataset has no observations on frames with board poses")
    _check_orientation_diversity(compiled, opts)
    refs = build_references(dataset)
    diagnostics: dict[str, StageDiagnostics] = {}
    intrinsics = {c.camera_id: c for c in dataset.cameras}
    if not opts.skip_stage1:
        estimate, selected = stage1_procrustes(dataset, refs, opts, compiled)
        energy = objective_3d_refs(compiled, refs, estimate)
        diagnostics["stage1_procrustes"] = StageDiagnostics(
            stage="stage1_procrustes",
            iterations=opts.procrustes_rounds,
            start_objective=float("inf"),
            end_objective=energy,
            selected_candidate=selected,
        )
    else:
        x0 = opts.initial_x if opts.initial_x is not None else RigidTransform.identity()
        estimate = _closed_form_extrinsics(compiled, refs, x0, intrinsics)
    if not opts.skip_stage2:
        estimate, d2 = stage2_refine_3d(estimate, dataset, refs, opts, compiled)
        diagnostics["stage2_3d"] = d2
    if not opts.skip_stage3:
        return stage3_refine_2d(estimate, dataset, opts, reg, compiled, diagnostics)
    return CalibrationResult(
        estimate=estimate,
        board_rmse=board_rmse(estimate, dataset),
        stage_diagnostics=diagnostics,
        converged=True,
    )


def objective_3d_refs(
    compiled: CompiledDataset, refs: PnpReferences, estimate: ChainEstimate
) -> float:
    """3D objective evaluated directly on a compiled dataset."""
    blocks = _align_references(compiled, refs)
    return _refs_energy(compiled, blocks, estimate.board_to_marker, estimate.extrinsics)


# ---------------------------------------------------------------------------
# Fixed-X baseline: plain least squares, then Huber-weighted refinement.


class _WeightedSystem:
    """Wrap a residual system with fixed per-row weights."""

    def __init__(self, inner, row_weights: np.ndarray):
        self.inner = inner
        self.sqrt_w = np.sqrt(row_weights)

    def residuals(self, state):
        return self.inner.residuals(state) * self.sqrt_w

    def residuals_and_jacobian(self, state):
        r, jac = self.inner.residuals_and_jacobian(state)
        return r * self.sqrt_w, jac * self.sqrt_w[:, None]

    def apply_step(self, state, delta):
        return self.inner.apply_step(state, delta)


def _huber_row_weights(residuals: np.ndarray, obs_rows: int, delta: float) -> np.ndarray:
    """IRLS weights per residual row; observation rows share a per-corner norm."""
    weights = np.ones(residuals.shape[0])
    r2 = residuals[:obs_rows].reshape(-1, 2)
    norms = np.linalg.norm(r2, axis=1)
    w = np.where(norms > delta, delta / np.maximum(norms, 1e-30), 1.0)
    weights[:obs_rows] = np.repeat(w, 2)
    return weights


def calibrate_fixed_x(
    dataset: CalibrationDataset,
    known_x: RigidTransform,
    opts: SolverOptions | None = None,
) -> CalibrationResult:
    """Solve extrinsics only, with the board-to-marker transform frozen.

    An initial closed-form registration captures the basin, a plain
    least-squares pass fits the extrinsics, and Huber-weighted iteratively
    reweighted least squares refines them. Intrinsics stay fixed.
    """
    opts = opts or SolverOptions()
    compiled = compile_dataset(dataset)
    if compiled.observation_count == 0:
        raise EmptyReferences("dataset has no observations on frames with board poses")
    _check_orientation_diversity(compiled, opts)
    refs = build_references(dataset)
    intrinsics = {c.camera_id: c for c in dataset.cameras}
    estimate = _closed_form_extrinsics(compiled, refs, known_x, intrinsics)
    factory = {c.camera_id: c for c in dataset.cameras}
    reg = RegularizationConfig()
    system = _Refine2DSystem(
        compiled, factory, reg, optimize_intrinsics=False, fixed_x=known_x
    )
    estimate, d_lsq = lm_minimize(
        system,
        estimate,
        max_iters=opts.lm_max_iters,
        epsilon=opts.epsilon,
        reject_exceptions=(BehindCamera, InvalidArgument),
    )
    diagnostics = {
        "fixed_x_least_squares": StageDiagnostics(
            stage="fixed_x_least_squares",
            iterations=d_lsq.iterations,
            start_objective=d_lsq.start_objective,
            end_objective=d_lsq.end_objective,
            no_decrease=d_lsq.no_decrease,
            reason=d_lsq.reason,
        )
    }
    total_irls_iters = 0
    converged = d_lsq.converged
    for _ in range(8):
        residuals = system.residuals(estimate)
        weights = _huber_row_weights(residuals, system.obs_rows, HUBER_DELTA_PX)
        weighted = _WeightedSystem(system, weights)
        new_estimate, d_irls = lm_minimize(
            weighted,
            estimate,
            max_iters=opts.lm_max_iters,
            epsilon=opts.epsilon,
            reject_exceptions=(BehindCamera, InvalidArgument),
        )
        total_irls_iters += d_irls.iterations
        converged = d_irls.converged
        moved = max(
            np.linalg.norm(
                new_estimate.extrinsics[c].translation - estimate.extrinsics[c].translation
            )
            for c in new_estimate.extrinsics
        )
        estimate = new_estimate
        if moved < 1e-10:
            break
    diagnostics["fixed_x_huber"] = StageDiagnostics(
        stage="fixed_x_huber",
        iterations=total_irls_iters,
        start_objective=d_lsq.end_objective,
        end_objective=float(np.sum(system.residuals(estimate) ** 2)),
    )
    return CalibrationResult(
        estimate=estimate,
        board_rmse=board_rmse(estimate, dataset),
        stage_diagnostics=diagnostics,
        converged=converged,
    )
