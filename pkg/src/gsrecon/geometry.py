"""SE(3) pose algebra, pinhole projection and geodesic pose interpolation.

Poses are rigid world-to-camera transforms stored as a unit quaternion
(w, x, y, z) plus a translation; ``x_cam = R @ x_world + t``.  Twists are
6-vectors ordered (rotation, translation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeodesic, NonPositiveDepth

EPS_DEPTH = 1e-6
_SMALL_ANGLE = 1e-4


# -- quaternion helpers -----------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def mat_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion (w, x, y, z), Shepperd's branching."""
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        q = np.array([0.25 / s,
                      (R[2, 1] - R[1, 2]) * s,
                      (R[0, 2] - R[2, 0]) * s,
                      (R[1, 0] - R[0, 1]) * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return quat_to_mat(q) @ np.asarray(v, dtype=np.float64)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# -- core types -------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid SE(3) transform: unit quaternion (w,x,y,z) + translation."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(np.asarray(self.q, dtype=np.float64)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3).copy())

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_rt(R: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose(mat_to_quat(np.asarray(R, dtype=np.float64)), t)

    @staticmethod
    def from_axis_angle(axis, angle: float, t=(0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        q = np.concatenate([[np.cos(half)], np.sin(half) * axis])
        return Pose(q, np.asarray(t, dtype=np.float64))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_mat(self.q)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        M = np.eye(4)
        M[:3, :3] = self.rotation_matrix()
        M[:3, 3] = self.t
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point or an (N, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.t

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates (w2c convention)."""
        return -self.rotation_matrix().T @ self.t

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians, in [0, pi]."""
        w = min(1.0, abs(float(self.q[0])))
        return 2.0 * np.arccos(w)

    def as_vector(self) -> np.ndarray:
        """(qw, qx, qy, qz, tx, ty, tz), the serialization order."""
        return np.concatenate([self.q, self.t])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole K with image dimensions (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


# -- operations -------------------------------------------------------------

def compose(a: Pose, b: Pose) -> Pose:
    """Rigid transform applying b then a (matrix product A @ B)."""
    return Pose(quat_mul(a.q, b.q), quat_rotate(a.q, b.t) + a.t)


def invert(p: Pose) -> Pose:
    qi = quat_conj(p.q)
    return Pose(qi, -quat_rotate(qi, p.t))


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Transform taking a's camera frame to b's: b ∘ a⁻¹."""
    return compose(b, invert(a))


def geodesic_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation angle in radians, translation distance) between two poses."""
    rel = compose(invert(a), b)
    return rel.rotation_angle(), float(np.linalg.norm(rel.t))


def project(k: CameraIntrinsics, p: Pose, point: np.ndarray,
            eps_depth: float = EPS_DEPTH) -> tuple[np.ndarray, float]:
    """Pinhole projection of a world point; returns (pixel, depth)."""
    x, y, z = p.apply(np.asarray(point, dtype=np.float64))
    if z <= eps_depth:
        raise NonPositiveDepth(f"point depth {z:.3g} <= {eps_depth:.3g}")
    pixel = np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])
    return pixel, float(z)


def unproject(k: CameraIntrinsics, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Inverse of `project` for the identity pose (camera coordinates)."""
    u, v = pixel
    return np.array([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth])


# -- SE(3) exp / log --------------------------------------------------------

def _so3_coeffs(theta: float) -> tuple[float, float, float]:
    """(A, B, C) with R = I + A[w]x + B[w]x^2 and V = I + B[w]x + C[w]x^2."""
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        A = 1.0 - t2 / 6.0
        B = 0.5 - t2 / 24.0
        C = 1.0 / 6.0 - t2 / 120.0
    else:
        A = np.sin(theta) / theta
        B = (1.0 - np.cos(theta)) / (theta * theta)
        C = (theta - np.sin(theta)) / (theta ** 3)
    return A, B, C


def exp_se3(twist: np.ndarray) -> Pose:
    """Closed-form SE(3) exponential; twist ordered (rotation, translation)."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    w, u = twist[:3], twist[3:]
    theta = float(np.linalg.norm(w))
    A, B, C = _so3_coeffs(theta)
    W = skew(w)
    R = np.eye(3) + A * W + B * (W @ W)
    V = np.eye(3) + B * W + C * (W @ W)
    return Pose.from_rt(R, V @ u)


def log_se3(p: Pose) -> np.ndarray:
    """SE(3) logarithm; valid for rotation angles < pi."""
    theta = p.rotation_angle()
    R = p.rotation_matrix()
    if theta < _SMALL_ANGLE:
        w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    else:
        w = theta / (2.0 * np.sin(theta)) * np.array(
            [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    W = skew(w)
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        Vinv = np.eye(3) - 0.5 * W + (1.0 / 12.0 + t2 / 720.0) * (W @ W)
    else:
        coef = (1.0 - 0.5 * theta * np.cos(0.5 * theta) / np.sin(0.5 * theta)) / (theta * theta)
        Vinv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return np.concatenate([w, Vinv @ p.t])


def interpolate_pose(a: Pose, b: Pose, tau: float) -> Pose:
    """Geodesic interpolation a · exp(tau · log(a⁻¹ b)), tau in (0, 1)."""
    rel = compose(invert(a), b)
    if rel.rotation_angle() >= np.pi - 1e-6:
        raise DegenerateGeodesic("relative rotation angle too close to pi")
    return compose(a, exp_se3(tau * log_se3(rel)))


def chain_relative_poses(rels: list[Pose]) -> list[Pose]:
    """Absolute poses from pairwise relatives; output[0] is the identity.

    rels[i] takes frame i's camera coordinates to frame i+1's, so
    output[i+1] = rels[i] ∘ output[i].
    """
    if not rels:
        raise ValueError("relative pose list must be nonempty")
    poses = [Pose.identity()]
    for rel in rels:
        poses.append(compose(rel, poses[-1]))
    return poses
