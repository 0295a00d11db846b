"""SE(3) algebra, closed-form rigid registration, and rotation sampling.

Conventions: rotations are 3x3 orthonormal matrices with determinant +1,
translations are 3-vectors in meters, twists carry the rotation part first
(radians, axis-angle) and the translation part second (meters).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, InvalidArgument

# Below this rotation angle the exp/log maps switch to series expansions.
SMALL_ANGLE = 1e-8


def _as_readonly(a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.shape != shape:
        raise InvalidArgument(f"expected array of shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rigid body pose: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = _as_readonly(self.rotation, (3, 3))
        tr = _as_readonly(self.translation, (3,))
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise InvalidArgument("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidArgument("expected a 4x4 homogeneous matrix")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self applied after other: (self ∘ other)(p) = self(other(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a 3-vector or an (n, 3) stack of points."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )


@dataclass(frozen=True, eq=False)
class Twist:
    """se(3) element: rotation_part is axis-angle, translation_part in meters."""

    rotation_part: np.ndarray
    translation_part: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation_part", _as_readonly(self.rotation_part, (3,)))
        object.__setattr__(
            self, "translation_part", _as_readonly(self.translation_part, (3,))
        )

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation_part, self.translation_part])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Twist):
            return NotImplemented
        return np.array_equal(self.rotation_part, other.rotation_part) and np.array_equal(
            self.translation_part, other.translation_part
        )


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_many(v: np.ndarray) -> np.ndarray:
    """Skew matrices for an (n, 3) stack, returned as (n, 3, 3)."""
    n = v.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle 3-vector."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    if theta > 2.0 * math.pi:
        # Wrap large angles so Rodrigues stays orthonormal for wild inputs.
        wrapped = math.fmod(theta, 2.0 * math.pi)
        omega = omega * (wrapped / theta)
        theta = wrapped
    k = skew(omega)
    k2 = k @ k
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * k2
    # sin and 1-cos written in stable forms; coefficients act on O(theta^2) terms.
    a = math.sin(theta) / theta
    half = math.sin(0.5 * theta)
    b = 2.0 * half * half / (theta * theta)
    return np.eye(3) + a * k + b * k2


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector for a rotation matrix; angle in [0, pi]."""
    rot = np.asarray(rot, dtype=np.float64)
    vee = 0.5 * np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    s = float(np.linalg.norm(vee))  # sin(theta)
    c = 0.5 * (np.trace(rot) - 1.0)  # cos(theta)
    theta = math.atan2(s, min(1.0, max(-1.0, c)))
    if theta < SMALL_ANGLE:
        return vee
    if math.pi - theta < 1e-6:
        # Near pi the skew part vanishes; recover the axis from the diagonal.
        d = np.diagonal(rot)
        i = int(np.argmax(d))
        axis = np.zeros(3)
        axis[i] = math.sqrt(max(0.0, (d[i] + 1.0) * 0.5))
        denom = 2.0 * axis[i]
        j, k = (i + 1) % 3, (i + 2) % 3
        axis[j] = (rot[i, j] + rot[j, i]) / (2.0 * denom)
        axis[k] = (rot[i, k] + rot[k, i]) / (2.0 * denom)
        if vee @ axis < 0.0:
            axis = -axis
        return theta * axis
    return (theta / s) * vee


def _v_matrix(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    k2 = k @ k
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + k2 / 6.0
    t2 = theta * theta
    half = math.sin(0.5 * theta)
    b = 2.0 * half * half / t2  # (1 - cos) / theta^2
    c = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + b * k + c * k2


def _v_matrix_inverse(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    k2 = k @ k
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + k2 / 12.0
    t2 = theta * theta
    half = math.sin(0.5 * theta)
    one_minus_cos = 2.0 * half * half
    coeff = (1.0 - 0.5 * theta * math.sin(theta) / one_minus_cos) / t2
    return np.eye(3) - 0.5 * k + coeff * k2


def se3_exp(xi: Twist) -> RigidTransform:
    """Exponential map from a twist to a rigid transform."""
    omega = xi.rotation_part
    return RigidTransform(so3_exp(omega), _v_matrix(omega) @ xi.translation_part)


def se3_log(transform: RigidTransform) -> Twist:
    """Inverse of se3_exp; valid for rotation angles below pi."""
    omega = so3_log(transform.rotation)
    rho = _v_matrix_inverse(omega) @ transform.translation
    return Twist(omega, rho)


def rotation_angle(rot: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = 0.5 * (float(np.trace(rot)) - 1.0)
    return math.acos(min(1.0, max(-1.0, c)))


def rotation_frobenius_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius norm of the difference of two rotation matrices, in [0, 2*sqrt(2)]."""
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def procrustes_fit(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Best rigid transform T minimizing sum ||T(src_i) - dst_i||^2.

    Closed-form solution from the SVD of the centered cross-covariance, with
    the reflection corrected so the rotation determinant is +1. Requires at
    least 3 non-collinear correspondences.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise InvalidArgument("src and dst must have the same shape")
    if src.shape[0] < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    h = (src - c_src).T @ (dst - c_dst)
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0.0 or s[1] <= 1e-10 * s[0]:
        raise DegenerateConfiguration("correspondences are collinear or coincident")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, c_dst - rot @ c_src)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions, components ordered (x, y, z, w).

    Accepts a single quaternion (4,) or a stack (n, 4).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((q.shape[0], 3, 3))
    out[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[:, 0, 1] = 2.0 * (x * y - z * w)
    out[:, 0, 2] = 2.0 * (x * z + y * w)
    out[:, 1, 0] = 2.0 * (x * y + z * w)
    out[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[:, 1, 2] = 2.0 * (y * z - x * w)
    out[:, 2, 0] = 2.0 * (x * z - y * w)
    out[:, 2, 1] = 2.0 * (y * z + x * w)
    out[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out[0] if single else out


def random_rotations(count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrices, shape (count, 3, 3)."""
    u1 = rng.random(count)
    u2 = rng.random(count)
    u3 = rng.random(count)
    two_pi = 2.0 * math.pi
    q = np.stack(
        [
            np.sqrt(1.0 - u1) * np.sin(two_pi * u2),
            np.sqrt(1.0 - u1) * np.cos(two_pi * u2),
            np.sqrt(u1) * np.sin(two_pi * u3),
            np.sqrt(u1) * np.cos(two_pi * u3),
        ],
        axis=1,
    )
    return quaternion_to_matrix(q)


@dataclass(frozen=True, eq=False)
class RotationCandidateSet:
    """Ordered, well-spread rotation candidates plus the seed that produced them."""

    rotations: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        rots = np.array(self.rotations, dtype=np.float64)
        rots.setflags(write=False)
        object.__setattr__(self, "rotations", rots)

    def __len__(self) -> int:
        return self.rotations.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RotationCandidateSet):
            return NotImplemented
        return self.seed == other.seed and np.array_equal(self.rotations, other.rotations)


def sample_candidate_rotations(
    count: int = 30, pool: int = 300, seed: int = 0
) -> RotationCandidateSet:
    """Select well-distributed rotations from a uniform random pool.

    Greedy farthest-point selection under the pairwise Frobenius distance.
    The first pick is the pool element nearest the identity so that a
    near-trivial initial guess is always represented; each later pick
    maximizes the minimum distance to everything already selected.
    """
    if count <= 0:
        raise InvalidArgument("count must be positive")
    if count > pool:
        raise InvalidArgument(f"count ({count}) exceeds pool size ({pool})")
    rng = np.random.default_rng(seed)
    pool_rots = random_rotations(pool, rng)
    flat = pool_rots.reshape(pool, 9)
    dist_to_identity = np.linalg.norm(flat - np.eye(3).reshape(9), axis=1)
    selected = [int(np.argmin(dist_to_identity))]
    min_dist = np.linalg.norm(flat - flat[selected[0]], axis=1)
    for _ in range(count - 1):
        min_dist[selected] = -1.0
        nxt = int(np.argmax(min_dist))
        selected.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(flat - flat[nxt], axis=1))
    return RotationCandidateSet(pool_rots[selected], seed)
