"""Rotations, rigid poses, pinhole projection and frame-to-frame warping.

Conventions (fixed across the whole library):

* Quaternions are Hamilton, stored ``(x, y, z, w)``, and represent the
  passive rotation global->local: ``v_local = q.rotation_matrix() @ v_global``
  for a body attitude quaternion.
* ``rotation_matrix(q1 * q2) == rotation_matrix(q1) @ rotation_matrix(q2)``.
* Pixel coordinates are ``(u, v)`` with ``u`` along image width and pixel
  centers at integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DimensionMismatch

DEPTH_EPS = 1e-6  # meters; minimum depth considered in front of a camera


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


class UnitQuaternion:
    """Unit quaternion stored as (x, y, z, w)."""

    __slots__ = ("x", "y", "z", "w")

    def __init__(self, x: float, y: float, z: float, w: float):
        n = np.sqrt(x * x + y * y + z * z + w * w)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion norm too small to normalize")
        self.x = x / n
        self.y = y / n
        self.z = z / n
        self.w = w / n

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(0.0, 0.0, 0.0, 1.0)

    @classmethod
    def from_array(cls, q: np.ndarray) -> "UnitQuaternion":
        return cls(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w])

    @classmethod
    def from_axis_angle(cls, rotvec: np.ndarray) -> "UnitQuaternion":
        """Exponential map; ``rotation_matrix`` of the result equals expm(skew(rotvec))."""
        rotvec = np.asarray(rotvec, dtype=float)
        angle = float(np.linalg.norm(rotvec))
        if angle < 1e-12:
            half = 0.5 * rotvec  # first order in the small-angle limit
            return cls(half[0], half[1], half[2], 1.0)
        axis = rotvec / angle
        s = np.sin(0.5 * angle)
        return cls(axis[0] * s, axis[1] * s, axis[2] * s, np.cos(0.5 * angle))

    def to_rotvec(self) -> np.ndarray:
        """Logarithm map, inverse of :meth:`from_axis_angle`."""
        vec = np.array([self.x, self.y, self.z])
        s = float(np.linalg.norm(vec))
        w = float(np.clip(self.w, -1.0, 1.0))
        if s < 1e-12:
            return 2.0 * vec / max(w, 1e-12)
        angle = 2.0 * np.arctan2(s, w)
        if angle > np.pi:
            angle -= 2.0 * np.pi
        return (angle / s) * vec

    def rotation_matrix(self) -> np.ndarray:
        x, y, z, w = self.x, self.y, self.z, self.w
        xx, yy, zz = x * x, y * y, z * z
        xy, xz, yz = x * y, x * z, y * z
        wx, wy, wz = w * x, w * y, w * z
        return np.array(
            [
                [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
                [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
                [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
            ]
        )

    @classmethod
    def from_rotation_matrix(cls, R: np.ndarray) -> "UnitQuaternion":
        R = np.asarray(R, dtype=float)
        trace = R[0, 0] + R[1, 1] + R[2, 2]
        if trace > 0.0:
            s = np.sqrt(trace + 1.0) * 2.0
            w = 0.25 * s
            x = (R[2, 1] - R[1, 2]) / s
            y = (R[0, 2] - R[2, 0]) / s
            z = (R[1, 0] - R[0, 1]) / s
        elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            w = (R[2, 1] - R[1, 2]) / s
            x = 0.25 * s
            y = (R[0, 1] + R[1, 0]) / s
            z = (R[0, 2] + R[2, 0]) / s
        elif R[1, 1] > R[2, 2]:
            s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
            w = (R[0, 2] - R[2, 0]) / s
            x = (R[0, 1] + R[1, 0]) / s
            y = 0.25 * s
            z = (R[1, 2] + R[2, 1]) / s
        else:
            s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
            w = (R[1, 0] - R[0, 1]) / s
            x = (R[0, 2] + R[2, 0]) / s
            y = (R[1, 2] + R[2, 1]) / s
            z = 0.25 * s
        return cls(x, y, z, w)

    def multiply(self, other: "UnitQuaternion") -> "UnitQuaternion":
        """Hamilton product; composes rotation matrices in the same order."""
        x1, y1, z1, w1 = self.x, self.y, self.z, self.w
        x2, y2, z2, w2 = other.x, other.y, other.z, other.w
        return UnitQuaternion(
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        )

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        return self.multiply(other)

    def conjugate(self) -> "UnitQuaternion":
        return UnitQuaternion(-self.x, -self.y, -self.z, self.w)

    inverse = conjugate

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return self.rotation_matrix() @ np.asarray(v, dtype=float)

    def angle_to(self, other: "UnitQuaternion") -> float:
        """Geodesic angle in radians between the two rotations."""
        return float(np.linalg.norm((self * other.conjugate()).to_rotvec()))

    def __repr__(self) -> str:
        return f"UnitQuaternion({self.x:.6g}, {self.y:.6g}, {self.z:.6g}, {self.w:.6g})"


@dataclass
class Pose:
    """Body attitude (global->body quaternion) and body position in global frame."""

    rotation: UnitQuaternion
    translation: np.ndarray  # (3,), meters

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(UnitQuaternion.identity(), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        return self.rotation.rotation_matrix()

    def to_local(self, p_global: np.ndarray) -> np.ndarray:
        return self.rotation_matrix() @ (np.asarray(p_global, dtype=float) - self.translation)

    def to_global(self, p_local: np.ndarray) -> np.ndarray:
        return self.rotation_matrix().T @ np.asarray(p_local, dtype=float) + self.translation

    def inverse(self) -> "Pose":
        """Pose of the global frame expressed in the body frame."""
        Rinv = self.rotation.conjugate()
        return Pose(Rinv, -self.rotation_matrix() @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Chain transforms: (self.compose(other)).to_local(p) == self.to_local(other.to_local(p))."""
        return Pose(
            self.rotation * other.rotation,
            other.translation + other.rotation_matrix().T @ self.translation,
        )


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image bounds")

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image resized by ``factor`` (e.g. 0.25 for stride 4)."""
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


@dataclass
class Extrinsics:
    """Rigid IMU-to-camera transform: v_cam = R @ v_imu + t."""

    rotation: UnitQuaternion  # IMU -> camera
    translation: np.ndarray  # IMU origin expressed in the camera frame, meters

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls(UnitQuaternion.identity(), np.zeros(3))


def transform_to_camera(pose: Pose, ext: Extrinsics, point_global: np.ndarray) -> np.ndarray:
    """Map global points into the camera frame of the given IMU pose.

    Accepts a single (3,) point or an (..., 3) array.
    """
    p = np.asarray(point_global, dtype=float)
    R_ig = pose.rotation_matrix()
    R_ci = ext.rotation.rotation_matrix()
    return (p - pose.translation) @ (R_ci @ R_ig).T + ext.translation


def camera_center(pose: Pose, ext: Extrinsics) -> np.ndarray:
    """Camera optical center in the global frame."""
    R_ig = pose.rotation_matrix()
    R_ci = ext.rotation.rotation_matrix()
    return pose.translation - R_ig.T @ (R_ci.T @ ext.translation)


def camera_from_global(pose: Pose, ext: Extrinsics) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) with p_cam = R @ p_global + t for the camera of this IMU pose."""
    R = ext.rotation.rotation_matrix() @ pose.rotation_matrix()
    t = ext.translation - R @ pose.translation
    return R, t


def project(intrinsics: CameraIntrinsics, point_camera: np.ndarray) -> np.ndarray:
    """Pinhole projection of camera-frame points to pixels.

    Raises BehindCamera if any point has depth <= DEPTH_EPS.
    """
    p = np.asarray(point_camera, dtype=float)
    z = p[..., 2]
    if np.any(z <= DEPTH_EPS):
        raise BehindCamera(f"depth {np.min(z):.3g} m is behind the camera")
    u = intrinsics.fx * p[..., 0] / z + intrinsics.cx
    v = intrinsics.fy * p[..., 1] / z + intrinsics.cy
    return np.stack([u, v], axis=-1)


def back_project(intrinsics: CameraIntrinsics, pixel: np.ndarray, depth) -> np.ndarray:
    """Inverse of :func:`project`: pixel + depth -> camera-frame point."""
    uv = np.asarray(pixel, dtype=float)
    z = np.asarray(depth, dtype=float)
    x = (uv[..., 0] - intrinsics.cx) / intrinsics.fx * z
    y = (uv[..., 1] - intrinsics.cy) / intrinsics.fy * z
    return np.stack([x, y, z], axis=-1)


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) coordinate grids of shape (height, width)."""
    u, v = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    return u, v


def warp_coordinates(
    z_inv_target: np.ndarray,
    pose_target: Pose,
    pose_ref: Pose,
    ext: Extrinsics,
    intr: CameraIntrinsics,
    valid: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel correspondence from the target view into a reference view.

    Each target pixel is back-projected with depth 1/z_inv, moved into the
    reference camera, and projected. Returns an (H, W, 2) pixel-coordinate
    grid and an (H, W) bool mask that is False where the inverse depth is
    invalid, the reference-frame depth is <= DEPTH_EPS, or the warped
    coordinate falls outside the reference image bounds.
    """
    values = getattr(z_inv_target, "values", z_inv_target)
    z_inv = np.asarray(values, dtype=float)
    if z_inv.shape != (intr.height, intr.width):
        raise DimensionMismatch(
            f"inverse depth grid {z_inv.shape} does not match intrinsics "
            f"({intr.height}, {intr.width})"
        )
    if valid is None:
        valid = getattr(z_inv_target, "valid", None)
    mask = np.isfinite(z_inv) & (z_inv > 0.0)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)

    u, v = pixel_grid(intr.width, intr.height)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(mask, 1.0 / z_inv, 1.0)
    pts_t = back_project(intr, np.stack([u, v], axis=-1), depth)  # (H, W, 3)

    R_t, t_t = camera_from_global(pose_target, ext)
    R_r, t_r = camera_from_global(pose_ref, ext)
    # p_ref = R_r (R_t^T (p_t - t_t)) + t_r, composed into one affine map
    R_rt = R_r @ R_t.T
    t_rt = t_r - R_rt @ t_t
    pts_r = pts_t @ R_rt.T + t_rt

    z_r = pts_r[..., 2]
    mask = mask & (z_r > DEPTH_EPS)
    safe_z = np.where(mask, z_r, 1.0)
    warped_u = intr.fx * pts_r[..., 0] / safe_z + intr.cx
    warped_v = intr.fy * pts_r[..., 1] / safe_z + intr.cy
    tol = 1e-9  # keeps exact-boundary pixels valid despite float rounding
    mask = (
        mask
        & (warped_u >= -tol)
        & (warped_u <= intr.width - 1.0 + tol)
        & (warped_v >= -tol)
        & (warped_v <= intr.height - 1.0 + tol)
    )
    coords = np.stack(
        [np.clip(warped_u, 0.0, intr.width - 1.0), np.clip(warped_v, 0.0, intr.height - 1.0)],
        axis=-1,
    )
    coords[~mask] = -1.0
    return coords, mask
