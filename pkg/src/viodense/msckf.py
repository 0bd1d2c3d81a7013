"""Sliding-window MSCKF fusing IMU and monocular bearings.

State: current navigation state (attitude, position, velocity, gyro and
accelerometer biases), a window of historical IMU pose clones, and a small
set of 3D landmarks kept in the state. Error-state layout is
``[attitude(3), position(3), velocity(3), bg(3), ba(3) | 6 per clone | 3 per landmark]``.

Attitude error convention: ``R_true = Exp(-dtheta) @ R_est`` where R maps
global vectors into the IMU frame; all Jacobians below follow from it.
Features not kept in the state update the filter through projection onto the
left nullspace of their position Jacobian, which removes the landmark error
from the linearized residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.stats import chi2

from .depthmap import SparseMetricPoint
from .errors import (
    DivergedSolve,
    InsufficientParallax,
    RankDeficient,
    SingularInnovation,
    TimestampGap,
)
from .geometry import (
    DEPTH_EPS,
    CameraIntrinsics,
    Extrinsics,
    Pose,
    UnitQuaternion,
    camera_center,
    camera_from_global,
    skew,
)

NAV_DIM = 15
ATT = slice(0, 3)
POS = slice(3, 6)
VEL = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)
CLONE_DIM = 6
LM_DIM = 3


@dataclass
class ImuSample:
    timestamp: float
    angular_velocity: np.ndarray  # rad/s, IMU frame
    linear_acceleration: np.ndarray  # m/s^2, specific force, IMU frame

    def __post_init__(self):
        self.angular_velocity = np.asarray(self.angular_velocity, dtype=float).reshape(3)
        self.linear_acceleration = np.asarray(self.linear_acceleration, dtype=float).reshape(3)


@dataclass
class FeatureTrack:
    feature_id: int
    observations: list = field(default_factory=list)  # [(timestamp, np.ndarray(2,) normalized uv)]

    def add(self, timestamp: float, uv_normalized: np.ndarray):
        self.observations.append((timestamp, np.asarray(uv_normalized, dtype=float).reshape(2)))

    def __len__(self) -> int:
        return len(self.observations)


@dataclass
class NavState:
    orientation: UnitQuaternion  # global -> IMU
    position: np.ndarray  # meters, global
    velocity: np.ndarray  # m/s, global
    gyro_bias: np.ndarray  # rad/s
    accel_bias: np.ndarray  # m/s^2

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        self.gyro_bias = np.asarray(self.gyro_bias, dtype=float).reshape(3)
        self.accel_bias = np.asarray(self.accel_bias, dtype=float).reshape(3)

    @classmethod
    def zero(cls) -> "NavState":
        return cls(UnitQuaternion.identity(), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))

    def pose(self) -> Pose:
        return Pose(self.orientation, self.position.copy())

    def copy(self) -> "NavState":
        return NavState(
            UnitQuaternion.from_array(self.orientation.as_array()),
            self.position.copy(),
            self.velocity.copy(),
            self.gyro_bias.copy(),
            self.accel_bias.copy(),
        )


class FilterState:
    """Navigation state, pose-clone window, landmarks and joint covariance."""

    def __init__(self, nav: NavState, covariance: np.ndarray, time: float):
        self.nav = nav
        self.clones: list[tuple[float, Pose]] = []
        self.landmarks: list[np.ndarray] = []
        self.landmark_ids: list[int] = []
        self.covariance = np.asarray(covariance, dtype=float)
        self.time = float(time)
        if self.covariance.shape != (NAV_DIM, NAV_DIM):
            raise ValueError("initial covariance must be 15x15")

    def dim(self) -> int:
        return NAV_DIM + CLONE_DIM * len(self.clones) + LM_DIM * len(self.landmarks)

    def clone_slice(self, i: int) -> slice:
        start = NAV_DIM + CLONE_DIM * i
        return slice(start, start + CLONE_DIM)

    def landmark_slice(self, j: int) -> slice:
        start = NAV_DIM + CLONE_DIM * len(self.clones) + LM_DIM * j
        return slice(start, start + LM_DIM)

    def clone_index(self, timestamp: float, tol: float = 1e-9) -> int:
        for i, (t, _) in enumerate(self.clones):
            if abs(t - timestamp) <= tol:
                return i
        raise KeyError(f"no clone at t={timestamp}")

    def symmetrize(self):
        self.covariance = 0.5 * (self.covariance + self.covariance.T)

    def max_asymmetry(self) -> float:
        return float(np.abs(self.covariance - self.covariance.T).max())

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.covariance + self.covariance.T)).min())


@dataclass
class FilterConfig:
    window_size: int = 11  # pose clones kept (c + 1)
    # standard-EKF point landmarks (no first-estimates Jacobians) leak
    # spurious information as they are relinearized; a small budget plus the
    # bounded lifetime below keeps 50-run Monte-Carlo pose NEES inside the
    # 95% band, measured out-of-band at budget 25
    slam_budget: int = 10
    min_msckf_obs: int = 3
    chi2_confidence: float = 0.95
    pixel_noise: float = 1.0  # px, converted with fx to normalized coords
    gravity: float = 9.81
    max_imu_gap: float = 0.02  # seconds
    gyro_noise_density: float = 1.6968e-4  # rad/s/sqrt(Hz)
    gyro_walk: float = 1.9393e-5  # rad/s^2/sqrt(Hz)
    accel_noise_density: float = 2.0e-3  # m/s^2/sqrt(Hz)
    accel_walk: float = 3.0e-3  # m/s^3/sqrt(Hz)
    min_parallax: float = 1e-3  # rad, max ray angle below which triangulation refuses
    max_gn_iters: int = 20
    slam_drop_after: int = 11  # frames unseen before a landmark is marginalized
    # landmarks are refreshed after a bounded lifetime: persistent points keep
    # being relinearized around an evolving estimate, which slowly leaks
    # spurious information into the unobservable directions
    slam_max_lifetime: int = 20  # frames

    def gravity_vec(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity])

    def chi2_threshold(self, dof: int) -> float:
        return float(chi2.ppf(self.chi2_confidence, dof))


# --- propagation -------------------------------------------------------------


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    x1, y1, z1, w1 = a
    x2, y2, z2, w2 = b
    return np.array(
        [
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        ]
    )


def _quat_deriv(q: np.ndarray, omega: np.ndarray) -> np.ndarray:
    # q maps global->IMU, body rate omega: qdot = -1/2 * omega_pure (x) q
    return -0.5 * _quat_mul(np.array([omega[0], omega[1], omega[2], 0.0]), q)


def _rk4_quat(q: np.ndarray, dt: float, wa: np.ndarray, wb: np.ndarray) -> np.ndarray:
    """RK4 on the quaternion kinematics with the rate linear from wa to wb."""
    wm = 0.5 * (wa + wb)
    k1 = _quat_deriv(q, wa)
    k2 = _quat_deriv(q + 0.5 * dt * k1, wm)
    k3 = _quat_deriv(q + 0.5 * dt * k2, wm)
    k4 = _quat_deriv(q + dt * k3, wb)
    out = q + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return out / np.linalg.norm(out)


def _integrate_interval(nav: NavState, dt, w1, a1, w2, a2, gravity_vec):
    """RK4 quaternion step plus trapezoidal velocity/position update.

    ``w`` and ``a`` are bias-corrected rate and specific force at the
    interval endpoints; the rate is interpolated linearly inside the step.
    """
    q_new = UnitQuaternion.from_array(_rk4_quat(nav.orientation.as_array(), dt, w1, w2))

    R1 = nav.orientation.rotation_matrix()
    acc1 = R1.T @ a1 + gravity_vec
    acc2 = q_new.rotation_matrix().T @ a2 + gravity_vec
    v_new = nav.velocity + 0.5 * dt * (acc1 + acc2)
    p_new = nav.position + 0.5 * dt * (nav.velocity + v_new)

    nav.orientation = q_new
    nav.velocity = v_new
    nav.position = p_new
    return R1


def _interval_phi_q(R1, w_mid, a_mid, dt, config: FilterConfig):
    """Second-order discrete transition and process noise for one IMU interval."""
    F = np.zeros((NAV_DIM, NAV_DIM))
    F[ATT, ATT] = -skew(w_mid)
    F[ATT, BG] = -np.eye(3)
    F[POS, VEL] = np.eye(3)
    F[VEL, ATT] = -R1.T @ skew(a_mid)
    F[VEL, BA] = -R1.T

    phi = np.eye(NAV_DIM) + F * dt + 0.5 * (F @ F) * dt * dt

    G = np.zeros((NAV_DIM, 12))
    G[ATT, 0:3] = -np.eye(3)
    G[VEL, 3:6] = -R1.T
    G[BG, 6:9] = np.eye(3)
    G[BA, 9:12] = np.eye(3)
    qc = np.diag(
        np.concatenate(
            [
                np.full(3, config.gyro_noise_density**2),
                np.full(3, config.accel_noise_density**2),
                np.full(3, config.gyro_walk**2),
                np.full(3, config.accel_walk**2),
            ]
        )
    )
    Qd = G @ qc @ G.T * dt
    return phi, Qd


def propagate(
    state: FilterState, samples: list[ImuSample], to_time: float, config: FilterConfig
) -> FilterState:
    """Propagate mean and covariance to ``to_time`` using the IMU stream.

    Samples must cover [state.time, to_time]; rate/force between samples is
    linearly interpolated. Raises TimestampGap when consecutive samples are
    further apart than the configured maximum or the span is not covered.
    """
    if to_time < state.time:
        raise ValueError("cannot propagate backwards")
    if to_time == state.time:
        return state
    if not samples:
        raise TimestampGap("no IMU samples provided")
    times = np.array([s.timestamp for s in samples])
    if np.any(np.diff(times) <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")
    gaps = np.diff(times)
    if gaps.size and gaps.max() > config.max_imu_gap + 1e-12:
        raise TimestampGap(f"IMU gap {gaps.max():.4f}s exceeds {config.max_imu_gap}s")
    eps = 1e-9
    if times[0] > state.time + config.max_imu_gap or times[-1] < to_time - eps:
        raise TimestampGap("IMU samples do not span the propagation interval")

    omegas = np.stack([s.angular_velocity for s in samples])
    accels = np.stack([s.linear_acceleration for s in samples])

    def measure(t):
        w = np.array([np.interp(t, times, omegas[:, k]) for k in range(3)])
        a = np.array([np.interp(t, times, accels[:, k]) for k in range(3)])
        return w, a

    knots = [state.time] + [float(t) for t in times if state.time < t < to_time] + [to_time]
    g_vec = config.gravity_vec()
    n = state.dim()
    for t1, t2 in zip(knots[:-1], knots[1:]):
        dt = t2 - t1
        if dt <= 0:
            continue
        w1_m, a1_m = measure(t1)
        w2_m, a2_m = measure(t2)
        w1 = w1_m - state.nav.gyro_bias
        w2 = w2_m - state.nav.gyro_bias
        a1 = a1_m - state.nav.accel_bias
        a2 = a2_m - state.nav.accel_bias

        R1 = _integrate_interval(state.nav, dt, w1, a1, w2, a2, g_vec)
        phi, Qd = _interval_phi_q(R1, 0.5 * (w1 + w2), 0.5 * (a1 + a2), dt, config)

        P = state.covariance
        P[:NAV_DIM, :NAV_DIM] = phi @ P[:NAV_DIM, :NAV_DIM] @ phi.T + Qd
        if n > NAV_DIM:
            P[:NAV_DIM, NAV_DIM:] = phi @ P[:NAV_DIM, NAV_DIM:]
            P[NAV_DIM:, :NAV_DIM] = P[:NAV_DIM, NAV_DIM:].T
    state.symmetrize()
    state.time = float(to_time)
    return state


# --- clone management --------------------------------------------------------


def _append_clone(state: FilterState, timestamp: float):
    d = state.dim()
    idx = NAV_DIM + CLONE_DIM * len(state.clones)
    J = np.zeros((CLONE_DIM, d))
    J[0:3, ATT] = np.eye(3)
    J[3:6, POS] = np.eye(3)

    P = state.covariance
    cross = J @ P  # (6, d)
    block = J @ P @ J.T
    new = np.zeros((d + CLONE_DIM, d + CLONE_DIM))
    new[:idx, :idx] = P[:idx, :idx]
    new[:idx, idx + CLONE_DIM:] = P[:idx, idx:]
    new[idx + CLONE_DIM:, :idx] = P[idx:, :idx]
    new[idx + CLONE_DIM:, idx + CLONE_DIM:] = P[idx:, idx:]
    new[idx:idx + CLONE_DIM, :idx] = cross[:, :idx]
    new[idx:idx + CLONE_DIM, idx + CLONE_DIM:] = cross[:, idx:]
    new[:idx, idx:idx + CLONE_DIM] = cross[:, :idx].T
    new[idx + CLONE_DIM:, idx:idx + CLONE_DIM] = cross[:, idx:].T
    new[idx:idx + CLONE_DIM, idx:idx + CLONE_DIM] = block
    state.covariance = new
    state.clones.append((float(timestamp), state.nav.pose()))


def _drop_rows_cols(state: FilterState, sl: slice):
    keep = np.concatenate([np.arange(sl.start), np.arange(sl.stop, state.covariance.shape[0])])
    state.covariance = state.covariance[np.ix_(keep, keep)]


def _prune_oldest_clone(state: FilterState):
    _drop_rows_cols(state, state.clone_slice(0))
    state.clones.pop(0)


def augment_clone(state: FilterState, timestamp: float, config: FilterConfig) -> FilterState:
    """Clone the current IMU pose into the window, marginalizing the oldest
    clone when the window exceeds its capacity."""
    if state.clones and timestamp < state.clones[-1][0]:
        raise ValueError("clone timestamps must be non-decreasing")
    _append_clone(state, timestamp)
    while len(state.clones) > config.window_size:
        _prune_oldest_clone(state)
    return state


# --- triangulation -----------------------------------------------------------


def triangulate(
    track: FeatureTrack,
    clones: list[tuple[float, Pose]],
    ext: Extrinsics,
    intr: CameraIntrinsics | None = None,
    min_parallax: float = 1e-3,
    max_iters: int = 20,
    max_residual: float | None = None,
) -> tuple[np.ndarray, float]:
    """Estimate a global 3D point from a bearing track.

    Linear mid-point initialization followed by Gauss-Newton on the
    reprojection error in normalized coordinates. Returns the point and the
    final mean reprojection error (pixels when intrinsics are given,
    normalized units otherwise).
    """
    clone_map = {t: pose for t, pose in clones}
    cams = []
    for t_obs, uv in track.observations:
        pose = clone_map.get(t_obs)
        if pose is None:
            continue
        R, tvec = camera_from_global(pose, ext)
        cams.append((R, tvec, camera_center(pose, ext), uv))
    if len(cams) < 2:
        raise InsufficientParallax("need at least two observations with matching clones")

    dirs = []
    for R, _, _, uv in cams:
        d = R.T @ np.array([uv[0], uv[1], 1.0])
        dirs.append(d / np.linalg.norm(d))
    max_angle = 0.0
    for i in range(len(dirs)):
        for j in range(i + 1, len(dirs)):
            c = float(np.clip(np.dot(dirs[i], dirs[j]), -1.0, 1.0))
            max_angle = max(max_angle, np.arccos(c))
    if max_angle < min_parallax:
        raise InsufficientParallax(f"max ray angle {max_angle:.2e} rad below threshold")

    # mid-point init: sum_i (I - d d^T) (p - o_i) = 0
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for d, (_, _, origin, _) in zip(dirs, cams):
        M = np.eye(3) - np.outer(d, d)
        A += M
        b += M @ origin
    if np.linalg.cond(A) > 1e12:
        raise InsufficientParallax("mid-point system is singular")
    p = np.linalg.solve(A, b)

    def residuals(point):
        res = []
        jac = []
        for R, tvec, _, uv in cams:
            pc = R @ point + tvec
            if pc[2] <= DEPTH_EPS:
                return None, None
            inv_z = 1.0 / pc[2]
            pred = np.array([pc[0] * inv_z, pc[1] * inv_z])
            res.append(pred - uv)
            J_proj = inv_z * np.array([[1.0, 0.0, -pc[0] * inv_z], [0.0, 1.0, -pc[1] * inv_z]])
            jac.append(J_proj @ R)
        return np.concatenate(res), np.vstack(jac)

    r, J = residuals(p)
    if r is None:
        raise DivergedSolve("initial point behind a camera")
    cost = float(r @ r)
    stalls = 0
    ever_improved = False
    for it in range(max_iters):
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        improved = False
        scale = 1.0
        for _ in range(6):
            r_new, J_new = residuals(p + scale * step)
            if r_new is not None and float(r_new @ r_new) < cost:
                p = p + scale * step
                r, J = r_new, J_new
                cost = float(r_new @ r_new)
                improved = ever_improved = True
                break
            scale *= 0.5
        if not improved:
            stalls += 1
            if stalls > 1:
                break
        else:
            stalls = 0
            if np.linalg.norm(scale * step) < 1e-12:
                break
    if not ever_improved and it + 1 >= max_iters:
        raise DivergedSolve("Gauss-Newton made no progress")

    err = float(np.mean(np.linalg.norm(r.reshape(-1, 2), axis=1)))
    if max_residual is not None and err > max_residual:
        raise DivergedSolve(f"mean reprojection residual {err:.2e} above limit")
    if intr is not None:
        err *= 0.5 * (intr.fx + intr.fy)
    return p, err


# --- measurement construction ------------------------------------------------


def _projection_jacobian(pc: np.ndarray) -> np.ndarray:
    inv_z = 1.0 / pc[2]
    return inv_z * np.array([[1.0, 0.0, -pc[0] * inv_z], [0.0, 1.0, -pc[1] * inv_z]])


def feature_jacobians(
    state: FilterState, track: FeatureTrack, p_global: np.ndarray, ext: Extrinsics
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked residual and Jacobians (w.r.t. the error state and the landmark).

    Observations whose clone has been marginalized or that see the point at
    non-positive depth are skipped.
    """
    d = state.dim()
    R_ci = ext.rotation.rotation_matrix()
    rows_H = []
    rows_Hf = []
    rows_r = []
    clone_times = {t: i for i, (t, _) in enumerate(state.clones)}
    for t_obs, uv in track.observations:
        idx = clone_times.get(t_obs)
        if idx is None:
            continue
        _, pose = state.clones[idx]
        R_ig = pose.rotation_matrix()
        delta = p_global - pose.translation
        pc = R_ci @ (R_ig @ delta) + ext.translation
        if pc[2] <= DEPTH_EPS:
            continue
        J = _projection_jacobian(pc)
        pred = np.array([pc[0] / pc[2], pc[1] / pc[2]])
        H_theta = J @ R_ci @ skew(R_ig @ delta)
        H_pos = -J @ R_ci @ R_ig
        H_f = J @ R_ci @ R_ig

        H = np.zeros((2, d))
        sl = state.clone_slice(idx)
        H[:, sl.start:sl.start + 3] = H_theta
        H[:, sl.start + 3:sl.stop] = H_pos
        rows_H.append(H)
        rows_Hf.append(H_f)
        rows_r.append(uv - pred)
    if not rows_H:
        raise InsufficientParallax("no usable observations for this feature")
    return np.vstack(rows_H), np.vstack(rows_Hf), np.concatenate(rows_r)


def nullspace_project(
    H_T: np.ndarray, H_f: np.ndarray, residual: np.ndarray, noise_cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project the stacked linearized measurement onto the left nullspace of H_f.

    Output satisfies N^T H_f = 0 and has rows = rows(H_f) - rank(H_f).
    Raises RankDeficient when the landmark is unconstrained in some direction.
    """
    H_f = np.asarray(H_f, dtype=float)
    m = H_f.shape[0]
    if H_f.shape[1] != 3 or m <= 3:
        raise ValueError("H_f must be (m, 3) with m > 3")
    Q, R, _ = scipy.linalg.qr(H_f, mode="full", pivoting=True)
    diag = np.abs(np.diag(R[:3, :3]))
    rank = int(np.sum(diag > max(m, 3) * np.finfo(float).eps * diag.max())) if diag.max() > 0 else 0
    if rank < 3:
        raise RankDeficient("feature Jacobian rank below 3")
    N = Q[:, rank:]
    return N.T @ H_T, N.T @ residual, N.T @ noise_cov @ N


# --- EKF update --------------------------------------------------------------


def _apply_correction(state: FilterState, dx: np.ndarray):
    nav = state.nav
    nav.orientation = UnitQuaternion.from_axis_angle(-dx[ATT]) * nav.orientation
    nav.position = nav.position + dx[POS]
    nav.velocity = nav.velocity + dx[VEL]
    nav.gyro_bias = nav.gyro_bias + dx[BG]
    nav.accel_bias = nav.accel_bias + dx[BA]
    for i, (t, pose) in enumerate(state.clones):
        sl = state.clone_slice(i)
        rot = UnitQuaternion.from_axis_angle(-dx[sl.start:sl.start + 3]) * pose.rotation
        state.clones[i] = (t, Pose(rot, pose.translation + dx[sl.start + 3:sl.stop]))
    for j in range(len(state.landmarks)):
        sl = state.landmark_slice(j)
        state.landmarks[j] = state.landmarks[j] + dx[sl]


def update(
    state: FilterState,
    H: np.ndarray,
    residual: np.ndarray,
    noise_cov: np.ndarray,
    config: FilterConfig,
    gate: bool = True,
) -> FilterState:
    """Standard EKF update with Joseph-form covariance.

    With ``gate`` enabled the whole measurement block is chi-square tested
    (dof = row count) against the innovation covariance and rejected outright
    on failure, leaving the state untouched.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    r = np.asarray(residual, dtype=float).reshape(-1)
    if H.shape[0] == 0:
        return state
    if H.shape[1] != state.dim():
        raise ValueError(f"H has {H.shape[1]} columns, state dimension is {state.dim()}")
    R = np.asarray(noise_cov, dtype=float)

    # QR compression keeps the solve small when many features are stacked
    if H.shape[0] > H.shape[1] and np.allclose(R, R[0, 0] * np.eye(R.shape[0])):
        Q, H_thin = np.linalg.qr(H)
        r = Q.T @ r
        H = H_thin
        R = R[0, 0] * np.eye(H.shape[0])

    P = state.covariance
    S = H @ P @ H.T + R
    try:
        chol = scipy.linalg.cho_factor(S, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise SingularInnovation(str(exc)) from exc

    if gate:
        gamma = float(r @ scipy.linalg.cho_solve(chol, r))
        if gamma > config.chi2_threshold(len(r)):
            return state

    K = scipy.linalg.cho_solve(chol, H @ P).T
    dx = K @ r
    I_KH = np.eye(state.dim()) - K @ H
    state.covariance = I_KH @ P @ I_KH.T + K @ R @ K.T
    state.symmetrize()
    _apply_correction(state, dx)
    return state


def init_from_gravity(samples: list[ImuSample], window: float = 0.5, gravity: float = 9.81) -> NavState:
    """Roll/pitch initialization from averaged accelerometer readings.

    Assumes the platform is near-static over the window; yaw and position are
    unobservable from gravity alone and start at zero. The averaged gyro rate
    seeds the gyro bias.
    """
    if not samples:
        raise ValueError("need at least one IMU sample")
    t0 = samples[0].timestamp
    used = [s for s in samples if s.timestamp <= t0 + window]
    accel = np.mean([s.linear_acceleration for s in used], axis=0)
    norm = np.linalg.norm(accel)
    if norm < 0.5 * gravity:
        raise ValueError("accelerometer mean too small for gravity alignment")
    up_body = accel / norm  # gravity reaction points up
    up_global = np.array([0.0, 0.0, 1.0])
    axis = np.cross(up_global, up_body)
    s = np.linalg.norm(axis)
    c = float(np.clip(np.dot(up_global, up_body), -1.0, 1.0))
    if s < 1e-12:
        q = UnitQuaternion.identity() if c > 0 else UnitQuaternion(1.0, 0.0, 0.0, 0.0)
    else:
        q = UnitQuaternion.from_axis_angle(axis / s * np.arctan2(s, c))
    gyro_bias = np.mean([s.angular_velocity for s in used], axis=0)
    return NavState(q, np.zeros(3), np.zeros(3), gyro_bias, np.zeros(3))


# --- NEES / consistency helpers ----------------------------------------------


def pose_error(state: FilterState, true_pose: Pose) -> np.ndarray:
    """6-vector [dtheta, dp] of the current nav pose error (true vs estimate)."""
    q_err = true_pose.rotation * state.nav.orientation.conjugate()
    dtheta = -q_err.to_rotvec()
    dp = true_pose.translation - state.nav.position
    return np.concatenate([dtheta, dp])


def pose_nees(state: FilterState, true_pose: Pose) -> float:
    e = pose_error(state, true_pose)
    P6 = np.zeros((6, 6))
    P6[:3, :3] = state.covariance[ATT, ATT]
    P6[:3, 3:] = state.covariance[ATT, POS]
    P6[3:, :3] = state.covariance[POS, ATT]
    P6[3:, 3:] = state.covariance[POS, POS]
    return float(e @ np.linalg.solve(P6, e))


# --- full filter -------------------------------------------------------------


@dataclass
class FilterStats:
    """Diagnostics accumulated while running the filter."""

    max_nullspace_ratio: float = 0.0
    nullspace_checks: int = 0
    gated_features: int = 0
    msckf_updates: int = 0
    slam_updates: int = 0
    dropped_tracks: int = 0


class MsckfFilter:
    """Orchestrates propagation, cloning and feature updates over a sequence."""

    def __init__(
        self,
        intrinsics: CameraIntrinsics,
        extrinsics: Extrinsics,
        config: FilterConfig | None = None,
        nav: NavState | None = None,
        initial_cov: np.ndarray | None = None,
        start_time: float = 0.0,
    ):
        self.intr = intrinsics
        self.ext = extrinsics
        self.config = config or FilterConfig()
        if initial_cov is None:
            initial_cov = np.diag(
                np.concatenate(
                    [
                        np.full(3, (0.5 * np.pi / 180.0) ** 2),
                        np.full(3, 0.01**2),
                        np.full(3, 0.05**2),
                        np.full(3, 1e-4**2),
                        np.full(3, 1e-3**2),
                    ]
                )
            )
        self.state = FilterState(nav or NavState.zero(), initial_cov, start_time)
        self.tracks: dict[int, FeatureTrack] = {}
        self.slam_index: dict[int, int] = {}
        self.slam_last_seen: dict[int, float] = {}
        self.slam_born: dict[int, int] = {}
        self.frame_count = 0
        self.stats = FilterStats()

    # -- helpers --

    def normalized_noise_std(self) -> float:
        return self.config.pixel_noise / self.intr.fx

    def normalize_pixels(self, uv_pixels: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv_pixels, dtype=float)
        return np.stack(
            [(uv[..., 0] - self.intr.cx) / self.intr.fx, (uv[..., 1] - self.intr.cy) / self.intr.fy],
            axis=-1,
        )

    def propagate_to(self, samples: list[ImuSample], to_time: float):
        propagate(self.state, samples, to_time, self.config)

    def camera_pose(self) -> Pose:
        pose = self.state.nav.pose()
        rot = self.ext.rotation * pose.rotation
        return Pose(rot, camera_center(pose, self.ext))

    # -- frame processing --

    def process_frame(
        self, observations: list[tuple[int, np.ndarray]], timestamp: float
    ) -> tuple[FilterState, list[SparseMetricPoint], Pose]:
        """Run one filtering step on a frame's feature observations.

        ``observations`` are (feature_id, normalized uv) pairs for features
        visible in this frame; propagation must already cover ``timestamp``.
        Returns the state, sparse metric points in the current camera frame,
        and the current camera pose.
        """
        if abs(self.state.time - timestamp) > 1e-6:
            raise ValueError("state must be propagated to the frame timestamp first")
        self.frame_count += 1
        _append_clone(self.state, timestamp)

        seen = set()
        for fid, uv in observations:
            seen.add(fid)
            if fid not in self.slam_index:
                self.tracks.setdefault(fid, FeatureTrack(fid)).add(timestamp, uv)

        # one batch update per frame: SLAM and MSCKF rows share a single
        # linearization point, limiting spurious information from repeated
        # relinearization
        rows_H: list[np.ndarray] = []
        rows_r: list[np.ndarray] = []
        self._collect_slam_rows(observations, timestamp, rows_H, rows_r)
        to_msckf, to_promote = self._select_tracks(seen)
        new_points = self._collect_msckf_rows(to_msckf, rows_H, rows_r)
        if rows_H:
            sigma = self.normalized_noise_std()
            H = np.vstack(rows_H)
            r = np.concatenate(rows_r)
            update(self.state, H, r, sigma * sigma * np.eye(len(r)), self.config, gate=False)
            self.stats.msckf_updates += 1

        # promotions re-linearize against the post-update state and grow it
        for track in to_promote:
            if not self._initialize_slam_feature(track):
                self.stats.dropped_tracks += 1
            del self.tracks[track.feature_id]

        self._drop_stale_landmarks(timestamp)
        while len(self.state.clones) > self.config.window_size:
            _prune_oldest_clone(self.state)
        self._trim_tracks()

        points = self._current_sparse_points(new_points)
        return self.state, points, self.camera_pose()

    def _select_tracks(self, seen: set) -> tuple[list[FeatureTrack], list[FeatureTrack]]:
        to_msckf = []
        to_promote = []
        stale = []
        budget = self.config.slam_budget - len(self.state.landmarks)
        for fid, track in self.tracks.items():
            if fid in self.slam_index:
                continue
            lost = fid not in seen
            full = len(track) >= self.config.window_size
            if not (lost or full):
                continue
            if len(track) < self.config.min_msckf_obs:
                if lost:
                    stale.append(fid)
                continue
            if full and not lost and budget > 0:
                to_promote.append(track)
                budget -= 1
            else:
                to_msckf.append(track)
        for fid in stale:
            del self.tracks[fid]
            self.stats.dropped_tracks += 1
        return to_msckf, to_promote

    def _collect_msckf_rows(self, to_msckf, rows_H, rows_r) -> list[tuple[int, np.ndarray]]:
        sigma = self.normalized_noise_std()
        var = sigma * sigma
        triangulated: list[tuple[int, np.ndarray]] = []

        for track in to_msckf:
            try:
                p, _ = triangulate(
                    track,
                    self.state.clones,
                    self.ext,
                    None,
                    min_parallax=self.config.min_parallax,
                    max_iters=self.config.max_gn_iters,
                    max_residual=8.0 * sigma,
                )
                H_x, H_f, r = feature_jacobians(self.state, track, p, self.ext)
                if H_f.shape[0] <= 3:
                    raise InsufficientParallax("too few rows for nullspace projection")
                H_proj, r_proj, _ = nullspace_project(H_x, H_f, r, var * np.eye(H_f.shape[0]))
            except (InsufficientParallax, DivergedSolve, RankDeficient):
                self.stats.dropped_tracks += 1
            else:
                ratio = np.linalg.norm(
                    np.linalg.qr(H_f, mode="complete")[0][:, 3:].T @ H_f
                ) / max(np.linalg.norm(H_f), 1e-300)
                self.stats.max_nullspace_ratio = max(self.stats.max_nullspace_ratio, float(ratio))
                self.stats.nullspace_checks += 1
                if self._feature_gate(H_proj, r_proj, var):
                    rows_H.append(H_proj)
                    rows_r.append(r_proj)
                    triangulated.append((track.feature_id, p))
                else:
                    self.stats.gated_features += 1
            del self.tracks[track.feature_id]
        return triangulated

    def _feature_gate(self, H: np.ndarray, r: np.ndarray, var: float) -> bool:
        S = H @ self.state.covariance @ H.T + var * np.eye(len(r))
        try:
            gamma = float(r @ np.linalg.solve(S, r))
        except np.linalg.LinAlgError:
            return False
        return gamma <= self.config.chi2_threshold(len(r))

    def _collect_slam_rows(self, observations, timestamp, rows_H, rows_r):
        sigma = self.normalized_noise_std()
        var = sigma * sigma
        clone_idx = len(self.state.clones) - 1
        _, pose = self.state.clones[clone_idx]
        R_ci = self.ext.rotation.rotation_matrix()
        R_ig = pose.rotation_matrix()
        d = self.state.dim()
        n_slam = 0
        for fid, uv in observations:
            j = self.slam_index.get(fid)
            if j is None:
                continue
            self.slam_last_seen[fid] = timestamp
            p = self.state.landmarks[j]
            delta = p - pose.translation
            pc = R_ci @ (R_ig @ delta) + self.ext.translation
            if pc[2] <= DEPTH_EPS:
                continue
            J = _projection_jacobian(pc)
            H = np.zeros((2, d))
            sl = self.state.clone_slice(clone_idx)
            H[:, sl.start:sl.start + 3] = J @ R_ci @ skew(R_ig @ delta)
            H[:, sl.start + 3:sl.stop] = -J @ R_ci @ R_ig
            H[:, self.state.landmark_slice(j)] = J @ R_ci @ R_ig
            r = uv - np.array([pc[0] / pc[2], pc[1] / pc[2]])
            if not self._feature_gate(H, r, var):
                self.stats.gated_features += 1
                continue
            rows_H.append(H)
            rows_r.append(r)
            n_slam += 1
        if n_slam:
            self.stats.slam_updates += 1

    def _initialize_slam_feature(self, track: FeatureTrack) -> bool:
        """Delayed initialization: triangulate, then split the stacked
        measurement into a part that defines the new landmark's covariance and
        a nullspace part used as a regular update."""
        sigma = self.normalized_noise_std()
        var = sigma * sigma
        try:
            p, _ = triangulate(
                track,
                self.state.clones,
                self.ext,
                None,
                min_parallax=self.config.min_parallax,
                max_iters=self.config.max_gn_iters,
                max_residual=8.0 * sigma,
            )
            H_x, H_f, r = feature_jacobians(self.state, track, p, self.ext)
        except (InsufficientParallax, DivergedSolve):
            return False
        m = H_f.shape[0]
        if m < 5:
            return False
        Q, Rf = np.linalg.qr(H_f, mode="complete")
        diag = np.abs(np.diag(Rf[:3, :3]))
        if diag.min() <= m * np.finfo(float).eps * diag.max():
            return False
        R1 = Rf[:3, :3]
        Hx1 = Q[:, :3].T @ H_x
        P = self.state.covariance
        R1_inv = np.linalg.inv(R1)
        P_ff = R1_inv @ (Hx1 @ P @ Hx1.T + var * np.eye(3)) @ R1_inv.T
        P_fx = -R1_inv @ Hx1 @ P

        d = self.state.dim()
        new = np.zeros((d + 3, d + 3))
        new[:d, :d] = P
        new[d:, :d] = P_fx
        new[:d, d:] = P_fx.T
        new[d:, d:] = P_ff
        self.state.covariance = new
        self.state.landmarks.append(np.asarray(p, dtype=float))
        self.state.landmark_ids.append(track.feature_id)
        self.slam_index[track.feature_id] = len(self.state.landmarks) - 1
        self.slam_last_seen[track.feature_id] = self.state.time
        self.slam_born[track.feature_id] = self.frame_count

        # leftover nullspace rows double as a standard MSCKF update
        H2 = Q[:, 3:].T @ H_x
        r2 = Q[:, 3:].T @ r
        if len(r2):
            pad = np.zeros((H2.shape[0], 3))
            H2 = np.hstack([H2, pad])
            update(self.state, H2, r2, var * np.eye(len(r2)), self.config, gate=True)
        return True

    def _remove_landmark(self, fid: int):
        j = self.slam_index[fid]
        _drop_rows_cols(self.state, self.state.landmark_slice(j))
        self.state.landmarks.pop(j)
        self.state.landmark_ids.pop(j)
        del self.slam_index[fid]
        self.slam_born.pop(fid, None)
        for other, k in self.slam_index.items():
            if k > j:
                self.slam_index[other] = k - 1

    def _drop_stale_landmarks(self, timestamp):
        horizon = self.config.slam_drop_after
        frame_dt = np.median(np.diff([t for t, _ in self.state.clones])) if len(self.state.clones) > 1 else 0.1
        cutoff = timestamp - horizon * float(frame_dt)
        for fid in list(self.slam_index.keys()):
            stale = self.slam_last_seen.get(fid, -np.inf) < cutoff
            expired = self.frame_count - self.slam_born.get(fid, self.frame_count) >= self.config.slam_max_lifetime
            if stale or expired:
                self._remove_landmark(fid)

    def _trim_tracks(self):
        if not self.state.clones:
            return
        oldest = self.state.clones[0][0]
        for fid in list(self.tracks.keys()):
            track = self.tracks[fid]
            track.observations = [(t, uv) for t, uv in track.observations if t >= oldest - 1e-9]
            if not track.observations:
                del self.tracks[fid]

    def _current_sparse_points(self, extra: list[tuple[int, np.ndarray]]) -> list[SparseMetricPoint]:
        nav_pose = self.state.nav.pose()
        R, t = camera_from_global(nav_pose, self.ext)
        points = []
        candidates = list(zip(self.state.landmark_ids, self.state.landmarks)) + extra
        for fid, p in candidates:
            pc = R @ p + t
            if pc[2] <= DEPTH_EPS:
                continue
            u = self.intr.fx * pc[0] / pc[2] + self.intr.cx
            v = self.intr.fy * pc[1] / pc[2] + self.intr.cy
            if 0 <= u <= self.intr.width - 1 and 0 <= v <= self.intr.height - 1:
                points.append(SparseMetricPoint(float(u), float(v), float(pc[2]), fid))
        return points
