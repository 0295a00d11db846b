"""LM core, PnP bootstrap, staged pipeline, and the fixed-X baseline."""

import math

import numpy as np
import pytest

from mocapcal.chain import (
    CalibrationDataset,
    ChainEstimate,
    MocapFrame,
    board_rmse,
    compile_dataset,
    make_grid_board,
)
from mocapcal.errors import (
    EmptyReferences,
    InsufficientCorners,
    SingularNormalEquations,
)
from mocapcal.geometry import (
    RigidTransform,
    Twist,
    rotation_angle,
    se3_exp,
    so3_exp,
)
from mocapcal.solver import (
    SolverOptions,
    build_references,
    calibrate,
    calibrate_fixed_x,
    lm_minimize,
    objective_3d_refs,
    pnp_board_pose,
    stage1_procrustes,
    stage2_refine_3d,
    stage3_refine_2d,
)
from mocapcal.synth import default_intrinsics, generate_scene, make_scene_spec

from conftest import NOISE_AXIS_02


def estimate_errors(estimate, truth):
    """Worst rotation (rad) and translation (m) error over X and all Y_c."""
    rot = rotation_angle(
        estimate.board_to_marker.rotation @ truth.board_to_marker.rotation.T
    )
    tr = np.linalg.norm(
        estimate.board_to_marker.translation - truth.board_to_marker.translation
    )
    for cam_id, y in truth.extrinsics.items():
        rot = max(rot, rotation_angle(estimate.extrinsics[cam_id].rotation @ y.rotation.T))
        tr = max(tr, np.linalg.norm(estimate.extrinsics[cam_id].translation - y.translation))
    return rot, tr


class _VectorSystem:
    """Plain vector-space residual system for LM unit tests."""

    def __init__(self, fn, jac):
        self.fn = fn
        self.jac = jac

    def residuals(self, x):
        return self.fn(x)

    def residuals_and_jacobian(self, x):
        return self.fn(x), self.jac(x)

    def apply_step(self, x, delta):
        return x + delta


class TestLMCore:
    def test_quadratic_converges_in_three_iterations(self):
        a = np.array([[2.0, 0.3], [0.1, 1.5], [0.4, 0.9]])
        b = np.array([1.0, -2.0, 0.5])
        target = np.linalg.lstsq(a, b, rcond=None)[0]
        system = _VectorSystem(lambda x: a @ x - b, lambda x: a)
        x, diag = lm_minimize(system, np.zeros(2), max_iters=50, epsilon=1e-12)
        assert diag.iterations <= 3
        assert np.linalg.norm(x - target) < 1e-8

    def test_rosenbrock_reaches_small_gradient(self):
        def fn(x):
            return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])

        def jac(x):
            return np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])

        x, diag = lm_minimize(
            _VectorSystem(fn, jac), np.array([-1.2, 1.0]), max_iters=500, epsilon=1e-16
        )
        grad = 2.0 * jac(x).T @ fn(x)
        assert np.linalg.norm(grad) < 1e-8

    def test_accepted_objectives_strictly_decrease(self):
        def fn(x):
            return np.array([x[0] ** 2 - 1.0, x[1] - math.sin(x[0])])

        def jac(x):
            return np.array([[2.0 * x[0], 0.0], [-math.cos(x[0]), 1.0]])

        _, diag = lm_minimize(
            _VectorSystem(fn, jac), np.array([3.0, -2.0]), max_iters=100, epsilon=1e-14
        )
        seq = diag.accepted_objectives
        assert all(b < a for a, b in zip(seq, seq[1:]))

    def test_singular_system_raises(self):
        a = np.zeros((3, 2))
        system = _VectorSystem(lambda x: a @ x - np.ones(3), lambda x: a)
        with pytest.raises(SingularNormalEquations):
            lm_minimize(system, np.zeros(2), max_iters=5, epsilon=1e-8)


class TestPnp:
    def _frame_arrays(self, scene, cam_id, frame_id):
        dataset = scene.dataset
        obs = [
            o for o in dataset.observations
            if o.camera_id == cam_id and o.frame_id == frame_id
        ]
        return obs

    def test_noise_free_recovery(self, clean_scene):
        dataset = clean_scene.dataset
        truth = clean_scene.ground_truth
        obs = self._frame_arrays(clean_scene, "cam0", dataset.frames[5].frame_id)
        assert len(obs) >= 4
        pose = pnp_board_pose(obs, dataset.board, dataset.camera_model("cam0"))
        frame = dataset.frames[5]
        expected = truth.extrinsics["cam0"].compose(frame.board_pose).compose(
            truth.board_to_marker
        )
        assert rotation_angle(pose.rotation @ expected.rotation.T) < 1e-7
        assert np.linalg.norm(pose.translation - expected.translation) < 1e-6

    def test_monte_carlo_translation_error(self):
        # Board half a meter from the camera, facing it, 0.2 px noise.
        board = make_grid_board(4, 3)
        model = default_intrinsics(1)[0]
        truth = RigidTransform(
            so3_exp(np.array([math.pi, 0.0, 0.0])), np.array([0.0, 0.0, 0.5])
        )
        from mocapcal.camera import project_points
        from mocapcal.solver import _pnp_pose

        rng = np.random.default_rng(42)
        errors = []
        clean = project_points(truth.apply(board.corners), model)
        for _ in range(100):
            noisy = clean + rng.normal(0.0, 0.2, size=clean.shape)
            pose = _pnp_pose(board.corners, noisy, model)
            errors.append(np.linalg.norm(pose.translation - truth.translation))
        assert np.median(errors) < 2e-3

    def test_three_corners_insufficient(self, clean_scene):
        dataset = clean_scene.dataset
        obs = self._frame_arrays(clean_scene, "cam0", dataset.frames[5].frame_id)[:3]
        with pytest.raises(InsufficientCorners):
            pnp_board_pose(obs, dataset.board, dataset.camera_model("cam0"))


class TestBuildReferences:
    def test_matches_generator_camera_frame_positions(self, clean_scene):
        dataset = clean_scene.dataset
        truth = clean_scene.ground_truth
        refs = build_references(dataset)
        frames = {f.frame_id: f for f in dataset.frames}
        keys = sorted(refs.entries)[::200]
        for cam_id, frame_id, corner_id in keys:
            frame = frames[frame_id]
            expected = truth.extrinsics[cam_id].apply(
                frame.board_pose.apply(
                    truth.board_to_marker.apply(dataset.board.corner_position(corner_id))
                )
            )
            assert np.linalg.norm(refs.entries[(cam_id, frame_id, corner_id)] - expected) < 1e-6

    def test_camera_without_detections_absent(self, clean_scene):
        dataset = clean_scene.dataset
        filtered = CalibrationDataset(
            dataset.frames,
            [o for o in dataset.observations if o.camera_id != "cam1"],
            dataset.board,
            dataset.cameras,
        )
        refs = build_references(filtered)
        assert "cam1" not in refs.cameras()
        assert "cam0" in refs.cameras()

    def test_bit_identical_across_runs(self, clean_scene):
        r1 = build_references(clean_scene.dataset)
        r2 = build_references(clean_scene.dataset)
        assert sorted(r1.entries) == sorted(r2.entries)
        for key in r1.entries:
            assert np.array_equal(r1.entries[key], r2.entries[key])

    def test_no_usable_frames_raises(self, clean_scene):
        dataset = clean_scene.dataset
        empty = CalibrationDataset(dataset.frames, [], dataset.board, dataset.cameras)
        with pytest.raises(EmptyReferences):
            build_references(empty)


class TestStage1:
    def test_noise_free_energy_small(self, clean_scene):
        # The alternation contracts linearly; enough rounds drive the 3D
        # energy to the 1e-4 scale on noise-free data.
        refs = build_references(clean_scene.dataset)
        opts = SolverOptions(procrustes_rounds=40)
        est, idx = stage1_procrustes(clean_scene.dataset, refs, opts)
        compiled = compile_dataset(clean_scene.dataset)
        assert 0 <= idx < 30
        assert objective_3d_refs(compiled, refs, est) < 1e-4

    def test_planted_candidate_is_selected(self, clean_scene):
        # With a single candidate planted at the true rotation the winner
        # must reach (essentially) zero energy; the full candidate set must
        # do at least as well as that basin.
        refs = build_references(clean_scene.dataset)
        compiled = compile_dataset(clean_scene.dataset)
        opts = SolverOptions(candidate_count=30, pool_size=300, seed=0)
        est, idx = stage1_procrustes(clean_scene.dataset, refs, opts)
        truth_rot = clean_scene.ground_truth.board_to_marker.rotation
        # winner ends near the true rotation regardless of starting candidate
        assert rotation_angle(est.board_to_marker.rotation @ truth_rot.T) < 0.05

    def test_single_camera_single_frame_exact(self):
        # One frame of exact references is reproduced exactly by the
        # closed-form alternation (the chain has enough freedom).
        spec = make_scene_spec(seed=21, camera_count=1, frame_count=40, board=make_grid_board(4, 3))
        scene = generate_scene(spec)
        dataset = scene.dataset
        first = dataset.frames[0].frame_id
        one = CalibrationDataset(
            [f for f in dataset.frames if f.frame_id == first],
            [o for o in dataset.observations if o.frame_id == first],
            dataset.board,
            dataset.cameras,
        )
        refs = build_references(one)
        est, _ = stage1_procrustes(one, refs, SolverOptions(procrustes_rounds=1))
        assert objective_3d_refs(compile_dataset(one), refs, est) < 1e-10

    def test_deterministic(self, noisy_scene):
        refs = build_references(noisy_scene.dataset)
        a, ia = stage1_procrustes(noisy_scene.dataset, refs, SolverOptions())
        b, ib = stage1_procrustes(noisy_scene.dataset, refs, SolverOptions())
        assert ia == ib
        assert a.board_to_marker == b.board_to_marker


class TestStage2:
    def test_from_truth_terminates_immediately(self, clean_scene):
        # Noise-free references make the ground truth a stationary point.
        refs = build_references(clean_scene.dataset)
        est, diag = stage2_refine_3d(
            clean_scene.ground_truth, clean_scene.dataset, refs, SolverOptions()
        )
        assert diag.iterations <= 2
        rot, tr = estimate_errors(est, clean_scene.ground_truth)
        assert rot < 1e-6 and tr < 1e-6

    def test_big_reduction_from_coarse_stage1(self):
        # Coarse stage 1 (one alternation round) leaves the 3D energy well
        # above its floor; stage 2 must cut it by at least 10x.
        spec = make_scene_spec(
            seed=31, camera_count=2, frame_count=60, board=make_grid_board(4, 3),
            pixel_noise_sigma=NOISE_AXIS_02,
        )
        scene = generate_scene(spec)
        refs = build_references(scene.dataset)
        compiled = compile_dataset(scene.dataset)
        floor = objective_3d_refs(compiled, refs, scene.ground_truth)
        opts = SolverOptions(procrustes_rounds=1)
        est1, _ = stage1_procrustes(scene.dataset, refs, opts, compiled)
        e1 = objective_3d_refs(compiled, refs, est1)
        assert e1 > 10.0 * floor, "test scene must leave stage 1 coarse"
        est2, _ = stage2_refine_3d(est1, scene.dataset, refs, opts, compiled)
        e2 = objective_3d_refs(compiled, refs, est2)
        assert e2 < e1 / 10.0

    def test_accepted_objectives_monotone(self, noisy_scene):
        refs = build_references(noisy_scene.dataset)
        opts = SolverOptions(procrustes_rounds=1)
        est1, _ = stage1_procrustes(noisy_scene.dataset, refs, opts)
        _, diag = stage2_refine_3d(est1, noisy_scene.dataset, refs, opts)
        # diagnostics carry start/end; end never exceeds start
        assert diag.end_objective <= diag.start_objective + 1e-12


class TestStage3:
    def test_noise_free_rmse_below_micro_pixel(self, clean_scene, clean_result):
        assert clean_result.board_rmse < 1e-6

    def test_noise_floor_rmse(self, noisy_result):
        assert 0.15 <= noisy_result.board_rmse <= 0.25

    def test_monotone_objective(self, noisy_result):
        d = noisy_result.stage_diagnostics["stage3_2d"]
        assert d.end_objective <= d.start_objective


class TestCalibrate:
    def test_exact_recovery(self, clean_scene, clean_result):
        rot, tr = estimate_errors(clean_result.estimate, clean_scene.ground_truth)
        assert rot < 1e-7
        assert tr < 1e-6
        assert clean_result.converged

    def test_deterministic_bit_for_bit(self, noisy_scene):
        a = calibrate(noisy_scene.dataset, SolverOptions(seed=4))
        b = calibrate(noisy_scene.dataset, SolverOptions(seed=4))
        assert a.board_rmse == b.board_rmse
        assert a.estimate == b.estimate

    def test_stage1_only_much_worse_than_full(self, clean_scene, clean_result):
        res1 = calibrate(
            clean_scene.dataset, SolverOptions(skip_stage2=True, skip_stage3=True)
        )
        assert res1.board_rmse >= 100.0 * max(clean_result.board_rmse, 1e-12)

    def test_skip_stage1_converges_with_more_stage2_iterations(self, noisy_scene, noisy_result):
        res = calibrate(noisy_scene.dataset, SolverOptions(skip_stage1=True))
        assert res.board_rmse < 0.25
        assert (
            res.stage_diagnostics["stage2_3d"].iterations
            >= noisy_result.stage_diagnostics["stage2_3d"].iterations
        )

    def test_rank_deficiency_guard(self, clean_scene):
        dataset = clean_scene.dataset
        keep = {dataset.frames[0].frame_id, dataset.frames[1].frame_id}
        tiny = CalibrationDataset(
            [f for f in dataset.frames if f.frame_id in keep],
            [o for o in dataset.observations if o.frame_id in keep],
            dataset.board,
            dataset.cameras,
        )
        with pytest.raises(SingularNormalEquations, match="orientation"):
            calibrate(tiny)

    def test_frames_without_board_pose_are_dropped(self, clean_scene):
        dataset = clean_scene.dataset
        frames = [
            MocapFrame(f.frame_id, f.time, None if i % 3 == 0 else f.board_pose, f.platform_pose)
            for i, f in enumerate(dataset.frames)
        ]
        dropped_ids = {f.frame_id for f in frames if f.board_pose is None}
        obs = [o for o in dataset.observations if o.frame_id not in dropped_ids]
        pruned = CalibrationDataset(frames, obs, dataset.board, dataset.cameras)
        res = calibrate(pruned, SolverOptions(epsilon=1e-8))
        rot, tr = estimate_errors(res.estimate, clean_scene.ground_truth)
        assert rot < 1e-6 and tr < 1e-5

    def test_gauge_consistency(self, noisy_scene, noisy_result):
        rng = np.random.default_rng(11)
        gauge = se3_exp(Twist(rng.normal(size=3), rng.normal(size=3)))
        dataset = noisy_scene.dataset
        frames_g = [
            MocapFrame(f.frame_id, f.time, gauge.compose(f.board_pose), f.platform_pose)
            for f in dataset.frames
        ]
        dataset_g = CalibrationDataset(
            frames_g, dataset.observations, dataset.board, dataset.cameras
        )
        res_g = calibrate(dataset_g)
        assert res_g.board_rmse == pytest.approx(noisy_result.board_rmse, abs=1e-9)
        for cam_id, y in noisy_result.estimate.extrinsics.items():
            expected = y.compose(gauge.inverse())
            got = res_g.estimate.extrinsics[cam_id]
            assert rotation_angle(got.rotation @ expected.rotation.T) < 1e-6
            assert np.linalg.norm(got.translation - expected.translation) < 1e-6

    def test_platform_pose_scene_recovers(self):
        spec = make_scene_spec(
            seed=51, camera_count=2, frame_count=60, board=make_grid_board(4, 3),
            platform_motion=True,
        )
        scene = generate_scene(spec)
        res = calibrate(scene.dataset, SolverOptions(epsilon=1e-8))
        rot, tr = estimate_errors(res.estimate, scene.ground_truth)
        assert rot < 1e-6 and tr < 1e-6


class TestFixedXBaseline:
    def test_matches_joint_at_true_x(self, clean_scene, clean_result):
        truth_x = clean_scene.ground_truth.board_to_marker
        res = calibrate_fixed_x(clean_scene.dataset, truth_x, SolverOptions(epsilon=1e-8))
        for cam_id in res.estimate.extrinsics:
            a = res.estimate.extrinsics[cam_id]
            b = clean_result.estimate.extrinsics[cam_id]
            assert rotation_angle(a.rotation @ b.rotation.T) < 1e-6
            assert np.linalg.norm(a.translation - b.translation) < 1e-6

    def test_translation_error_degrades_rmse(self, noisy_scene, noisy_result):
        truth_x = noisy_scene.ground_truth.board_to_marker
        wrong = RigidTransform(truth_x.rotation, truth_x.translation + np.array([0.005, 0, 0]))
        res = calibrate_fixed_x(noisy_scene.dataset, wrong)
        assert res.board_rmse > 1.5 * noisy_result.board_rmse

    def test_rotation_error_degrades_rmse(self, noisy_scene, noisy_result):
        # Perturbation sweep: growing rotation error on the frozen transform
        # degrades the baseline monotonically; the joint solve is unaffected.
        truth_x = noisy_scene.ground_truth.board_to_marker
        rmses = []
        for deg in (0.5, 2.0, 4.0):
            wrong = RigidTransform(
                truth_x.rotation @ so3_exp(np.array([0.0, math.radians(deg), 0.0])),
                truth_x.translation,
            )
            rmses.append(calibrate_fixed_x(noisy_scene.dataset, wrong).board_rmse)
        assert rmses[0] < rmses[1] < rmses[2]
        assert rmses[1] > 1.2 * noisy_result.board_rmse
        assert noisy_result.board_rmse < 0.25
