"""Synthetic desk-scale ground truth: trajectories, IMU streams and scenes.

Trajectories are represented by a cubic position spline plus a rotation
track that blends between orientation knots with a smoothstep schedule, so
body rates are available in closed form. IMU synthesis follows the usual
continuous-to-discrete noise conversion: white noise scaled by sqrt(rate),
bias random walk by sqrt(1/rate).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .depthmap import SparseMetricPoint
from .errors import NonMonotoneTimestamps, NoVisibleGeometry, TooFewPoses
from .geometry import (
    CameraIntrinsics,
    Extrinsics,
    Pose,
    UnitQuaternion,
    camera_center,
    camera_from_global,
    pixel_grid,
)
from .msckf import ImuSample


def _smoothstep(u):
    s = u * u * (3.0 - 2.0 * u)
    ds = 6.0 * u * (1.0 - u)
    return s, ds


def _batch_quat_from_rotvec(vecs: np.ndarray) -> np.ndarray:
    angles = np.linalg.norm(vecs, axis=-1)
    half = 0.5 * angles
    small = angles < 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, angles))
    q = np.empty(vecs.shape[:-1] + (4,))
    q[..., :3] = vecs * scale[..., None]
    q[..., 3] = np.cos(half)
    return q


def _batch_quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    x1, y1, z1, w1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    x2, y2, z2, w2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        ],
        axis=-1,
    )


def _batch_quat_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


class TrajectorySpline:
    """Cubic position spline plus smoothstep rotation blending between knots."""

    def __init__(self, times: np.ndarray, position_spline: CubicSpline, rotations: list[UnitQuaternion]):
        self.times = np.asarray(times, dtype=float)
        self.position = position_spline
        self.rotations = rotations
        self._quats = np.stack([q.as_array() for q in rotations])
        # relative rotation vectors phi_i with R(t_{i+1}) = Exp(-phi_i) R(t_i)
        phis = []
        for q0, q1 in zip(rotations[:-1], rotations[1:]):
            rel = q1 * q0.conjugate()
            phis.append(-rel.to_rotvec())
        self._phis = np.stack(phis) if phis else np.zeros((0, 3))

    @property
    def t_min(self) -> float:
        return float(self.times[0])

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def _segments(self, ts: np.ndarray):
        ts = np.asarray(ts, dtype=float)
        idx = np.clip(np.searchsorted(self.times, ts, side="right") - 1, 0, len(self.times) - 2)
        dt = self.times[idx + 1] - self.times[idx]
        u = np.clip((ts - self.times[idx]) / dt, 0.0, 1.0)
        return idx, u, dt

    def orientations(self, ts: np.ndarray) -> np.ndarray:
        """Quaternions (N, 4) at the given times."""
        idx, u, _ = self._segments(ts)
        s, _ = _smoothstep(u)
        steps = _batch_quat_from_rotvec(-s[..., None] * self._phis[idx])
        return _batch_quat_mul(steps, self._quats[idx])

    def orientation(self, t: float) -> UnitQuaternion:
        return UnitQuaternion.from_array(self.orientations(np.atleast_1d(t))[0])

    def angular_velocities_body(self, ts: np.ndarray) -> np.ndarray:
        idx, u, dt = self._segments(ts)
        _, ds = _smoothstep(u)
        return (ds / dt)[..., None] * self._phis[idx]

    def angular_velocity_body(self, t: float) -> np.ndarray:
        return self.angular_velocities_body(np.atleast_1d(t))[0]

    def pose(self, t: float) -> Pose:
        return Pose(self.orientation(t), self.position(t))

    def velocity(self, t: float) -> np.ndarray:
        return self.position(t, 1)

    def acceleration(self, t: float) -> np.ndarray:
        return self.position(t, 2)


def fit_spline(poses: list[tuple[float, Pose]]) -> TrajectorySpline:
    """Fit a trajectory through timestamped poses.

    The spline interpolates every input pose exactly at its knot. Requires at
    least four poses with strictly increasing timestamps.
    """
    if len(poses) < 4:
        raise TooFewPoses(f"need >=4 poses, got {len(poses)}")
    times = np.array([t for t, _ in poses], dtype=float)
    if np.any(np.diff(times) <= 0):
        raise NonMonotoneTimestamps("pose timestamps must be strictly increasing")
    positions = np.stack([p.translation for _, p in poses])
    spline = CubicSpline(times, positions, axis=0, bc_type="natural")
    rotations = [p.rotation for _, p in poses]
    return TrajectorySpline(times, spline, rotations)


@dataclass
class ImuNoiseModel:
    """Continuous-time noise densities plus the sampling rate."""

    accel_density: float = 2.0e-3  # m/s^2/sqrt(Hz)
    accel_walk: float = 3.0e-3  # m/s^3/sqrt(Hz)
    gyro_density: float = 1.6968e-4  # rad/s/sqrt(Hz)
    gyro_walk: float = 1.9393e-5  # rad/s^2/sqrt(Hz)
    rate: float = 200.0  # Hz

    def __post_init__(self):
        for name in ("accel_density", "accel_walk", "gyro_density", "gyro_walk", "rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def noiseless(cls, rate: float = 200.0) -> "ImuNoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0, rate)


def sample_imu(
    spline: TrajectorySpline,
    noise: ImuNoiseModel,
    gravity: float = 9.81,
    seed: int = 0,
) -> list[ImuSample]:
    """Sample an IMU stream along the trajectory.

    Specific force is the body-frame difference of trajectory acceleration and
    gravity; both channels get additive bias random walks and white noise with
    per-sample standard deviation density * sqrt(rate).
    """
    span = spline.t_max - spline.t_min
    if span < 1.0 / noise.rate:
        raise ValueError("spline span shorter than one IMU period")
    n = int(np.floor(span * noise.rate)) + 1
    times = spline.t_min + np.arange(n) / noise.rate

    rng = np.random.default_rng(seed)
    sqrt_rate = np.sqrt(noise.rate)
    sqrt_dt = 1.0 / sqrt_rate
    g_vec = np.array([0.0, 0.0, -gravity])

    R = _batch_quat_matrix(spline.orientations(times))  # (n, 3, 3)
    accel_true = np.einsum("nij,nj->ni", R, spline.acceleration(times) - g_vec)
    omega_true = spline.angular_velocities_body(times)

    accel_white = rng.normal(0.0, 1.0, (n, 3)) * (noise.accel_density * sqrt_rate)
    gyro_white = rng.normal(0.0, 1.0, (n, 3)) * (noise.gyro_density * sqrt_rate)
    # bias at sample k accumulates k walk increments (zero at the first sample)
    accel_bias = np.vstack(
        [np.zeros(3), np.cumsum(rng.normal(0.0, 1.0, (n - 1, 3)) * (noise.accel_walk * sqrt_dt), axis=0)]
    )
    gyro_bias = np.vstack(
        [np.zeros(3), np.cumsum(rng.normal(0.0, 1.0, (n - 1, 3)) * (noise.gyro_walk * sqrt_dt), axis=0)]
    )

    a_m = accel_true + accel_bias + accel_white
    w_m = omega_true + gyro_bias + gyro_white
    return [ImuSample(float(t), w_m[k], a_m[k]) for k, t in enumerate(times)]


# --- procedural texture -------------------------------------------------------


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1)."""
    seed_term = np.uint64((int(seed) * 0x165667B19E3779F9) % (1 << 64))
    h = (
        ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        + iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        + seed_term
    )
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(x: np.ndarray, y: np.ndarray, seed: int, octaves: int = 3, scale: float = 4.0) -> np.ndarray:
    """Multi-octave smoothed lattice noise in [0, 1], seeded and deterministic."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    total = np.zeros_like(x)
    amp = 1.0
    norm = 0.0
    freq = scale
    for octave in range(octaves):
        # large offset keeps lattice indices positive for the unsigned hash
        xs = x * freq + 4096.0
        ys = y * freq + 4096.0
        ix = np.floor(xs)
        iy = np.floor(ys)
        fx = xs - ix
        fy = ys - iy
        wx = fx * fx * (3.0 - 2.0 * fx)
        wy = fy * fy * (3.0 - 2.0 * fy)
        s = seed + 1013 * octave
        v00 = _hash01(ix, iy, s)
        v10 = _hash01(ix + 1, iy, s)
        v01 = _hash01(ix, iy + 1, s)
        v11 = _hash01(ix + 1, iy + 1, s)
        val = (1 - wx) * (1 - wy) * v00 + wx * (1 - wy) * v10 + (1 - wx) * wy * v01 + wx * wy * v11
        total += amp * val
        norm += amp
        amp *= 0.5
        freq *= 2.0
    return total / norm


# --- scene --------------------------------------------------------------------


@dataclass
class TexturedPlane:
    """Finite textured rectangle: center, two in-plane axes and half extents."""

    center: np.ndarray  # meters
    axis_u: np.ndarray  # unit, in-plane
    axis_v: np.ndarray  # unit, in-plane
    half_u: float
    half_v: float
    texture_seed: int = 0
    texture_scale: float = 4.0
    texture_octaves: int = 3

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.axis_u = np.asarray(self.axis_u, dtype=float).reshape(3)
        self.axis_v = np.asarray(self.axis_v, dtype=float).reshape(3)
        self.axis_u = self.axis_u / np.linalg.norm(self.axis_u)
        self.axis_v = self.axis_v / np.linalg.norm(self.axis_v)

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.axis_u, self.axis_v)
        return n / np.linalg.norm(n)

    def texture(self, pu: np.ndarray, pv: np.ndarray) -> np.ndarray:
        return value_noise(pu, pv, self.texture_seed, octaves=self.texture_octaves, scale=self.texture_scale)


@dataclass
class SyntheticScene:
    planes: list[TexturedPlane] = field(default_factory=list)
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))  # (N, 3)

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=float).reshape(-1, 3)


def cast_rays(scene: SyntheticScene, pose: Pose, ext: Extrinsics, intr: CameraIntrinsics):
    """Intersect every pixel ray with the scene planes.

    Returns (depth, plane_index, plane_uv): camera-frame depth in meters (NaN
    where nothing is hit), the index of the closest hit plane (-1 for none)
    and the in-plane coordinates of the hit point.
    """
    u, v = pixel_grid(intr.width, intr.height)
    dirs_cam = np.stack(
        [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1
    )
    R, _ = camera_from_global(pose, ext)
    origin = camera_center(pose, ext)
    dirs_global = dirs_cam @ R  # R^T applied to each direction

    depth = np.full(u.shape, np.inf)
    plane_idx = np.full(u.shape, -1, dtype=int)
    plane_uv = np.zeros(u.shape + (2,))
    for k, plane in enumerate(scene.planes):
        n = plane.normal
        denom = dirs_global @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((plane.center - origin) @ n) / denom
        hit = np.isfinite(t) & (t > 1e-6)
        pts = origin + t[..., None] * dirs_global
        rel = pts - plane.center
        pu = rel @ plane.axis_u
        pv = rel @ plane.axis_v
        hit &= (np.abs(pu) <= plane.half_u) & (np.abs(pv) <= plane.half_v)
        closer = hit & (t < depth)
        depth[closer] = t[closer]
        plane_idx[closer] = k
        plane_uv[closer] = np.stack([pu[closer], pv[closer]], axis=-1)
    depth[plane_idx < 0] = np.nan
    return depth, plane_idx, plane_uv


def render_image(scene: SyntheticScene, pose: Pose, ext: Extrinsics, intr: CameraIntrinsics) -> np.ndarray:
    """Grayscale image in [0, 1] of the scene's plane textures."""
    _, plane_idx, plane_uv = cast_rays(scene, pose, ext, intr)
    img = np.zeros(plane_idx.shape)
    for k, plane in enumerate(scene.planes):
        sel = plane_idx == k
        if sel.any():
            img[sel] = plane.texture(plane_uv[sel][:, 0], plane_uv[sel][:, 1])
    return img


def observe_landmarks(
    scene: SyntheticScene,
    pose: Pose,
    ext: Extrinsics,
    intr: CameraIntrinsics,
    rng: np.random.Generator | None = None,
    pixel_noise: float = 0.0,
    min_depth: float = 0.05,
) -> list[tuple[int, np.ndarray]]:
    """Project scene landmarks into the camera: (landmark_id, pixel uv) pairs."""
    if scene.landmarks.size == 0:
        return []
    R, t = camera_from_global(pose, ext)
    pc = scene.landmarks @ R.T + t
    vis = pc[:, 2] > min_depth
    out = []
    for i in np.nonzero(vis)[0]:
        u = intr.fx * pc[i, 0] / pc[i, 2] + intr.cx
        v = intr.fy * pc[i, 1] / pc[i, 2] + intr.cy
        if pixel_noise > 0.0 and rng is not None:
            u += rng.normal(0.0, pixel_noise)
            v += rng.normal(0.0, pixel_noise)
        if 0 <= u <= intr.width - 1 and 0 <= v <= intr.height - 1:
            out.append((int(i), np.array([u, v])))
    return out


def default_trajectory(duration: float = 10.0, knot_dt: float = 2.0, start: float = 0.0) -> TrajectorySpline:
    """Gentle desk-scale trajectory: lissajous translation, slow attitude wobble.

    The smoothstep blend concentrates angular acceleration inside knot
    intervals: the residual attitude error of a 200 Hz integrator scales like
    amplitude * (imu_dt / knot_dt)^2, so rotation amplitudes and knot spacing
    are chosen to keep that well below the millimeter budget of consumers.
    """
    times = np.arange(start, start + duration + 0.5 * knot_dt, knot_dt)
    poses = []
    for t in times:
        pos = np.array(
            [
                0.35 * np.sin(2 * np.pi * t / 8.0),
                0.30 * np.sin(2 * np.pi * t / 5.0 + 1.0),
                0.15 * np.sin(2 * np.pi * t / 6.3 + 2.0),
            ]
        )
        yaw = 0.12 * np.sin(2 * np.pi * t / 16.0)
        pitch = 0.08 * np.sin(2 * np.pi * t / 13.0 + 0.5)
        roll = 0.06 * np.sin(2 * np.pi * t / 11.0 + 1.2)
        Rz = UnitQuaternion.from_axis_angle(np.array([0, 0, yaw])).rotation_matrix()
        Ry = UnitQuaternion.from_axis_angle(np.array([0, pitch, 0])).rotation_matrix()
        Rx = UnitQuaternion.from_axis_angle(np.array([roll, 0, 0])).rotation_matrix()
        body_axes = Rz @ Ry @ Rx  # body axes expressed in global
        q = UnitQuaternion.from_rotation_matrix(body_axes.T)  # global -> body
        poses.append((float(t), Pose(q, pos)))
    return fit_spline(poses)


def default_scene(seed: int = 0, n_landmarks: int = 250) -> SyntheticScene:
    """Textured wall plus a tilted desk plane, landmarks scattered in front."""
    rng = np.random.default_rng(seed)
    landmarks = np.stack(
        [
            rng.uniform(-1.8, 1.8, n_landmarks),
            rng.uniform(-1.4, 1.4, n_landmarks),
            rng.uniform(1.5, 3.8, n_landmarks),
        ],
        axis=1,
    )
    wall = TexturedPlane(
        center=np.array([0.0, 0.0, 3.0]),
        axis_u=np.array([1.0, 0.0, 0.0]),
        axis_v=np.array([0.0, 1.0, 0.0]),
        half_u=3.5,
        half_v=3.0,
        texture_seed=seed,
    )
    desk = TexturedPlane(
        center=np.array([0.0, 0.9, 2.0]),
        axis_u=np.array([1.0, 0.0, 0.0]),
        axis_v=np.array([0.0, 0.35, 0.937]),
        half_u=2.0,
        half_v=1.2,
        texture_seed=seed + 7,
    )
    return SyntheticScene([wall, desk], landmarks)


def render_observations(
    scene: SyntheticScene,
    pose: Pose,
    ext: Extrinsics,
    intr: CameraIntrinsics,
    n_points: int,
    seed: int = 0,
    pixel_noise: float = 0.0,
) -> tuple[list[SparseMetricPoint], np.ndarray, list[tuple[int, np.ndarray]]]:
    """Render one frame's ground truth.

    Returns sparse metric points sampled from surface pixels (exact
    camera-frame depth), the dense ground-truth depth map in meters (NaN
    where no surface is visible) and bearing observations of the scene's
    point landmarks (noiseless projections plus optional pixel noise).
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    depth, plane_idx, _ = cast_rays(scene, pose, ext, intr)
    bearings = observe_landmarks(scene, pose, ext, intr, rng, pixel_noise)
    valid = plane_idx >= 0
    if not valid.any() and not bearings:
        raise NoVisibleGeometry("no surface or landmark visible from this pose")

    points: list[SparseMetricPoint] = []
    if valid.any():
        ys, xs = np.nonzero(valid)
        take = min(n_points, len(xs))
        sel = rng.choice(len(xs), size=take, replace=False)
        for s in sel:
            points.append(SparseMetricPoint(float(xs[s]), float(ys[s]), float(depth[ys[s], xs[s]])))
    return points, depth, bearings
