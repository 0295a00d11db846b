"""Rigid-transform algebra, registration, and rotation sampling."""

import math

import numpy as np
import pytest

from mocapcal.errors import DegenerateConfiguration, InvalidArgument
from mocapcal.geometry import (
    RigidTransform,
    Twist,
    procrustes_fit,
    quaternion_to_matrix,
    random_rotations,
    rotation_angle,
    rotation_frobenius_distance,
    sample_candidate_rotations,
    se3_exp,
    se3_log,
    so3_exp,
)


def quat_rotation_oracle(axis, angle):
    """Independent quaternion-based rotation matrix (test-local oracle)."""
    axis = np.asarray(axis) / np.linalg.norm(axis)
    half = angle / 2.0
    x, y, z = axis * math.sin(half)
    w = math.cos(half)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


class TestRigidTransform:
    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            t = se3_exp(Twist(rng.normal(size=3), rng.normal(size=3)))
            ident = t.compose(t.inverse())
            assert np.abs(ident.rotation - np.eye(3)).max() < 1e-9
            assert np.linalg.norm(ident.translation) < 1e-9

    def test_determinant_is_one(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            t = se3_exp(Twist(rng.normal(size=3), rng.normal(size=3)))
            assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-9

    def test_apply_matches_matrix_form(self):
        rng = np.random.default_rng(2)
        t = se3_exp(Twist(rng.normal(size=3), rng.normal(size=3)))
        pts = rng.normal(size=(7, 3))
        hom = np.column_stack([pts, np.ones(7)]) @ t.as_matrix().T
        assert np.allclose(t.apply(pts), hom[:, :3], atol=1e-12)

    def test_rejects_non_rotation(self):
        with pytest.raises(InvalidArgument):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))

    def test_immutable(self):
        t = RigidTransform.identity()
        with pytest.raises(ValueError):
            t.rotation[0, 0] = 5.0


class TestExpLog:
    def test_zero_twist_gives_identity(self):
        t = se3_exp(Twist(np.zeros(3), np.zeros(3)))
        assert np.array_equal(t.rotation, np.eye(3))
        assert np.array_equal(t.translation, np.zeros(3))

    def test_quarter_turn_about_x(self):
        t = se3_exp(Twist(np.array([math.pi / 2, 0, 0]), np.zeros(3)))
        expected = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)
        assert np.abs(t.rotation - expected).max() < 1e-12

    def test_rotation_matches_quaternion_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            axis = rng.normal(size=3)
            angle = rng.uniform(1e-6, math.pi - 1e-3)
            got = so3_exp(axis / np.linalg.norm(axis) * angle)
            assert np.abs(got - quat_rotation_oracle(axis, angle)).max() < 1e-12

    def test_round_trip_10k_random_twists(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(10_000):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(0.0, math.pi - 1e-3)
            xi = Twist(axis * angle, rng.normal(size=3))
            back = se3_log(se3_exp(xi))
            worst = max(worst, np.abs(back.as_vector() - xi.as_vector()).max())
        assert worst < 1e-9

    def test_round_trip_small_angles(self):
        rng = np.random.default_rng(5)
        for scale in (1e-12, 1e-9, 1e-7, 1e-4):
            xi = Twist(rng.normal(size=3) * scale, rng.normal(size=3))
            back = se3_log(se3_exp(xi))
            assert np.abs(back.as_vector() - xi.as_vector()).max() < 1e-12

    def test_exp_total_for_huge_angles(self):
        t = se3_exp(Twist(np.array([1e9, 2e9, -0.5e9]), np.ones(3)))
        assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-6


class TestProcrustes:
    def test_identity_when_dst_equals_src(self):
        rng = np.random.default_rng(6)
        src = rng.normal(size=(12, 3))
        fit = procrustes_fit(src, src)
        assert np.abs(fit.rotation - np.eye(3)).max() < 1e-12
        assert np.linalg.norm(fit.translation) < 1e-12

    def test_exact_recovery_of_forward_transform(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            src = rng.normal(size=(10, 3))
            truth = se3_exp(Twist(rng.normal(size=3), rng.normal(size=3)))
            fit = procrustes_fit(src, truth.apply(src))
            assert np.abs(fit.rotation - truth.rotation).max() < 1e-10
            assert np.linalg.norm(fit.translation - truth.translation) < 1e-10

    def test_mirror_dst_yields_best_proper_rotation(self):
        # Brute force over the sign flip of the smallest singular direction:
        # the returned proper rotation must beat the alternative.
        rng = np.random.default_rng(8)
        src = rng.normal(size=(8, 3))
        dst = src * np.array([1.0, 1.0, -1.0])  # reflected: improper best fit
        fit = procrustes_fit(src, dst)
        assert np.linalg.det(fit.rotation) > 0.999999999

        def cost(rot):
            moved = src @ rot.T
            moved = moved - moved.mean(axis=0) + dst.mean(axis=0)
            return np.sum((moved - dst) ** 2)

        c_src = src - src.mean(axis=0)
        c_dst = dst - dst.mean(axis=0)
        u, _, vt = np.linalg.svd(c_src.T @ c_dst)
        best = None
        for flip in (1.0, -1.0):
            rot = vt.T @ np.diag([1.0, 1.0, flip]) @ u.T
            if np.linalg.det(rot) > 0:
                best = rot if best is None or cost(rot) < cost(best) else best
        assert cost(fit.rotation) <= cost(best) + 1e-9

    def test_invariant_to_common_rigid_motion(self):
        rng = np.random.default_rng(9)
        src = rng.normal(size=(15, 3))
        dst = rng.normal(size=(15, 3))
        common = se3_exp(Twist(rng.normal(size=3), rng.normal(size=3)))
        fit_a = procrustes_fit(src, dst)
        fit_b = procrustes_fit(common.apply(src), common.apply(dst))
        res_a = np.sum((fit_a.apply(src) - dst) ** 2)
        res_b = np.sum((fit_b.apply(common.apply(src)) - common.apply(dst)) ** 2)
        assert abs(res_a - res_b) < 1e-9

    def test_collinear_raises(self):
        line = np.outer(np.linspace(0, 1, 5), np.array([1.0, 2.0, 3.0]))
        with pytest.raises(DegenerateConfiguration):
            procrustes_fit(line, line)

    def test_too_few_points_raises(self):
        pts = np.random.default_rng(10).normal(size=(2, 3))
        with pytest.raises(DegenerateConfiguration):
            procrustes_fit(pts, pts)


class TestFrobeniusDistance:
    def test_equal_rotations_give_zero(self):
        r = so3_exp(np.array([0.1, 0.2, 0.3]))
        assert rotation_frobenius_distance(r, r) == 0.0

    def test_half_turn_about_z(self):
        # identity vs 180 deg about z differs in the four planar entries:
        # sqrt(4 + 4) = 2 * sqrt(2).
        r = so3_exp(np.array([0.0, 0.0, math.pi]))
        assert abs(rotation_frobenius_distance(np.eye(3), r) - math.sqrt(8.0)) < 1e-12

    def test_symmetric(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            a, b = random_rotations(2, rng)
            assert rotation_frobenius_distance(a, b) == rotation_frobenius_distance(b, a)

    def test_range_bound(self):
        rng = np.random.default_rng(12)
        rots = random_rotations(200, rng)
        for i in range(0, 200, 2):
            d = rotation_frobenius_distance(rots[i], rots[i + 1])
            assert 0.0 <= d <= 2.0 * math.sqrt(2.0) + 1e-12


class TestCandidateSampling:
    def test_single_candidate(self):
        cs = sample_candidate_rotations(1, 50, seed=0)
        assert len(cs) == 1
        assert abs(np.linalg.det(cs.rotations[0]) - 1.0) < 1e-9

    def test_first_candidate_nearest_identity(self):
        cs = sample_candidate_rotations(10, 200, seed=5)
        pool = random_rotations(200, np.random.default_rng(5))
        dists = np.linalg.norm(pool.reshape(200, 9) - np.eye(3).reshape(9), axis=1)
        assert np.abs(cs.rotations[0] - pool[np.argmin(dists)]).max() == 0.0

    def test_count_equals_pool_returns_permutation(self):
        cs = sample_candidate_rotations(40, 40, seed=2)
        pool = random_rotations(40, np.random.default_rng(2))
        matched = set()
        for rot in cs.rotations:
            hits = np.flatnonzero(
                np.linalg.norm(pool.reshape(40, 9) - rot.reshape(9), axis=1) == 0.0
            )
            assert hits.size == 1
            matched.add(int(hits[0]))
        assert len(matched) == 40

    def test_deterministic_given_seed(self):
        a = sample_candidate_rotations(30, 300, seed=9)
        b = sample_candidate_rotations(30, 300, seed=9)
        assert np.array_equal(a.rotations, b.rotations)

    def test_all_pairwise_distances_positive(self):
        cs = sample_candidate_rotations(30, 300, seed=3)
        flat = cs.rotations.reshape(30, 9)
        for i in range(30):
            for j in range(i + 1, 30):
                assert np.linalg.norm(flat[i] - flat[j]) > 0.0

    def test_beats_random_sets_by_min_distance(self):
        # Monte-Carlo oracle: the farthest-point set's minimum pairwise
        # distance must dominate plain 30-rotation random draws.
        cs = sample_candidate_rotations(30, 300, seed=7)
        flat = cs.rotations.reshape(30, 9)
        d = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=2)
        fp_min = d[np.triu_indices(30, k=1)].min()
        rng = np.random.default_rng(1234)
        for _ in range(100):
            rand = random_rotations(30, rng).reshape(30, 9)
            dr = np.linalg.norm(rand[:, None, :] - rand[None, :, :], axis=2)
            assert fp_min >= dr[np.triu_indices(30, k=1)].min()

    def test_invalid_counts(self):
        with pytest.raises(InvalidArgument):
            sample_candidate_rotations(0, 10)
        with pytest.raises(InvalidArgument):
            sample_candidate_rotations(11, 10)


def test_rotation_angle_matches_axis_angle():
    rng = np.random.default_rng(13)
    for _ in range(100):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0, math.pi - 1e-6)
        assert abs(rotation_angle(so3_exp(axis * angle)) - angle) < 1e-7


def test_quaternion_to_matrix_is_rotation():
    rng = np.random.default_rng(14)
    q = rng.normal(size=(50, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    rots = quaternion_to_matrix(q)
    for r in rots:
        assert np.abs(r @ r.T - np.eye(3)).max() < 1e-12
        assert abs(np.linalg.det(r) - 1.0) < 1e-12
