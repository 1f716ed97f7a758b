"""LiDAR-inertial odometry: error-state filter over pose, velocity, and biases.

The 15-dimensional error state is ordered (dtheta, dt, dv, dbg, dba) with
body-side rotation perturbation R <- R * exp(dtheta). Propagation integrates
IMU samples between sweep cuts; the measurement update is iterated
point-to-plane registration against the voxel map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .geometry import (TIME_EPS, ImuSample, RigidTransform, Rotation,
                       _midpoint_segments, quat_exp_rotvec, quat_mul,
                       quat_rotate_many, quat_slerp_many, skew, so3_exp)
from .sweep import ReconstructedSweep
from .voxelmap import VoxelMap

log = logging.getLogger(__name__)

# error-state block offsets
_THETA = slice(0, 3)
_POS = slice(3, 6)
_VEL = slice(6, 9)
_BG = slice(9, 12)
_BA = slice(12, 15)

# plane acceptance: neighbourhoods must spread in two directions, and a query
# may sit at most this Mahalanobis distance (squared) inside that footprint
_MIN_INPLANE_SPREAD = 0.05  # m
_FOOTPRINT_CHI2 = 9.0


class ImuGapError(RuntimeError):
    """Consecutive IMU samples further apart than tolerated."""


@dataclass(frozen=True)
class NavState:
    """Navigation state of the IMU body frame in the world frame."""

    stamp: float
    pose: RigidTransform
    velocity: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    covariance: np.ndarray  # 15x15 over (dtheta, dt, dv, dbg, dba)

    def __post_init__(self):
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))
        object.__setattr__(self, "gyro_bias", np.asarray(self.gyro_bias, dtype=float).reshape(3))
        object.__setattr__(self, "accel_bias", np.asarray(self.accel_bias, dtype=float).reshape(3))
        object.__setattr__(self, "covariance", np.asarray(self.covariance, dtype=float).reshape(15, 15))

    @classmethod
    def initial(cls, stamp: float = 0.0, covariance: np.ndarray | None = None) -> "NavState":
        if covariance is None:
            covariance = np.diag(np.concatenate([
                np.full(3, 1e-4), np.full(3, 1e-4), np.full(3, 1e-2),
                np.full(3, 1e-6), np.full(3, 1e-4)]))
        return cls(stamp=stamp, pose=RigidTransform.identity(), velocity=np.zeros(3),
                   gyro_bias=np.zeros(3), accel_bias=np.zeros(3), covariance=covariance)


@dataclass
class LioConfig:
    """Tuning knobs for propagation and registration."""

    gravity: np.ndarray = None
    gyro_noise: float = 1e-3          # rad/s/sqrt(Hz)
    accel_noise: float = 1e-2         # m/s^2/sqrt(Hz)
    gyro_bias_noise: float = 1e-5
    accel_bias_noise: float = 1e-4
    imu_rate_hz: float = 200.0
    voxel_size: float = 0.5
    cell_capacity: int = 20
    min_point_spacing: float = 0.1
    downsample_grid: float = 0.25
    min_plane_points: int = 5
    planarity_max_ratio: float = 0.1
    max_plane_thickness: float = 0.04  # m, std of neighbours off the plane
    sigma_lidar: float = 0.02         # m, point-to-plane noise
    max_point_residual: float = 1.0   # m, correspondence gate
    max_iterations: int = 5
    convergence_tol: float = 1e-6
    min_correspondences: int = 10
    degenerate_inflation: float = 10.0

    def __post_init__(self):
        self.gravity = (np.array([0.0, 0.0, -9.81]) if self.gravity is None
                        else np.asarray(self.gravity, dtype=float).reshape(3))


@dataclass
class RegistrationInfo:
    status: str                 # "ok" | "bootstrap" | "degenerate"
    n_input: int = 0
    n_used: int = 0
    n_correspondences: int = 0
    rms: float = float("nan")
    iterations: int = 0


# ---------------------------------------------------------------------------
# propagation

def propagate(state: NavState, samples: list[ImuSample], config: LioConfig) -> NavState:
    """Advance mean and covariance through IMU samples.

    The mean follows midpoint integration; the covariance uses the linearized
    error transition per segment. Raises ImuGapError when consecutive samples
    are more than twice the nominal IMU period apart.
    """
    if not samples:
        return state
    max_gap = 2.0 / config.imu_rate_hz
    prev = state.stamp
    for s in samples:
        if s.stamp - prev > max_gap + TIME_EPS:
            raise ImuGapError(f"IMU gap {s.stamp - prev:.6f}s between {prev!r} and "
                              f"{s.stamp!r} exceeds {max_gap:.6f}s")
        prev = s.stamp

    q = state.pose.rotation.q.copy()
    p = state.pose.translation.copy()
    v = state.velocity.copy()
    bg, ba = state.gyro_bias, state.accel_bias
    P = state.covariance.copy()
    g = config.gravity
    sg2, sa2 = config.gyro_noise ** 2, config.accel_noise ** 2
    sbg2, sba2 = config.gyro_bias_noise ** 2, config.accel_bias_noise ** 2

    for stamp, dt, gyro, accel in _midpoint_segments(state.stamp, samples):
        w = gyro - bg
        a = accel - ba
        R = Rotation(q).as_matrix()

        F = np.eye(15)
        F[_THETA, _THETA] = so3_exp(-w * dt).as_matrix()
        F[_THETA, _BG] = -np.eye(3) * dt
        F[_POS, _VEL] = np.eye(3) * dt
        F[_VEL, _THETA] = -R @ skew(a) * dt
        F[_VEL, _BA] = -R * dt

        Q = np.zeros((15, 15))
        Q[_THETA, _THETA] = sg2 * dt * np.eye(3)
        Q[_VEL, _VEL] = sa2 * dt * np.eye(3)
        Q[_BG, _BG] = sbg2 * dt * np.eye(3)
        Q[_BA, _BA] = sba2 * dt * np.eye(3)

        P = F @ P @ F.T + Q

        q_half = quat_mul(q, quat_exp_rotvec(w * (0.5 * dt)))
        a_world = Rotation(q_half).apply(a) + g
        q = quat_mul(q, quat_exp_rotvec(w * dt))
        p = p + v * dt + 0.5 * a_world * dt * dt
        v = v + a_world * dt

    P = 0.5 * (P + P.T)
    return replace(state, stamp=samples[-1].stamp,
                   pose=RigidTransform(Rotation(q), p), velocity=v,
                   covariance=P)


# ---------------------------------------------------------------------------
# motion compensation

def compensate_motion(sweep: ReconstructedSweep, prev: NavState,
                      samples: list[ImuSample], lidar_to_body: RigidTransform,
                      gravity: np.ndarray) -> tuple[np.ndarray, int]:
    """Re-express sweep points in the LiDAR frame at the sweep end stamp.

    Builds the IMU-integrated pose timeline across the sweep, interpolates the
    body pose at each point stamp, and maps each point through the motion the
    platform underwent between its capture and the cut. Returns the corrected
    (N, 3) array and the count of points rejected for stamps outside the
    covered span.
    """
    from .geometry import imu_pose_timeline

    if not sweep.points:
        return np.empty((0, 3)), 0
    timeline = imu_pose_timeline(prev, samples, gravity)
    t_begin = timeline[0][0]
    t_end = timeline[-1][0]

    stamps = np.array([pt.stamp for pt in sweep.points])
    pts = np.stack([pt.position for pt in sweep.points])
    ok = (stamps >= t_begin - TIME_EPS) & (stamps <= t_end + TIME_EPS)
    rejected = int((~ok).sum())
    if rejected:
        log.warning("motion compensation dropped %d points outside [%.6f, %.6f]",
                    rejected, t_begin, t_end)
    stamps, pts = stamps[ok], pts[ok]
    if stamps.size == 0:
        return np.empty((0, 3)), rejected

    node_t = np.array([t for t, _ in timeline])
    node_q = np.stack([pose.rotation.q for _, pose in timeline])
    node_p = np.stack([pose.translation for _, pose in timeline])

    end_pose = timeline[-1][1].compose(lidar_to_body)  # world <- lidar at cut
    inv_rot = end_pose.rotation.inverse().as_matrix()
    inv_trans = -inv_rot @ end_pose.translation

    seg = np.clip(np.searchsorted(node_t, stamps, side="right") - 1, 0, len(node_t) - 2)
    lr = lidar_to_body.rotation.as_matrix()
    lt = lidar_to_body.translation
    span = node_t[seg + 1] - node_t[seg]
    u = np.where(span < TIME_EPS, 0.0,
                 np.clip((stamps - node_t[seg]) / np.maximum(span, TIME_EPS),
                         0.0, 1.0))
    q = quat_slerp_many(node_q[seg], node_q[seg + 1], u)
    trans = (1.0 - u)[:, None] * node_p[seg] + u[:, None] * node_p[seg + 1]
    p_body = pts @ lr.T + lt
    p_world = quat_rotate_many(q, p_body) + trans
    out = p_world @ inv_rot.T + inv_trans
    return out, rejected


# ---------------------------------------------------------------------------
# registration

def _boxplus(state: NavState, delta: np.ndarray) -> NavState:
    rot = state.pose.rotation * so3_exp(delta[_THETA])
    return replace(state,
                   pose=RigidTransform(rot, state.pose.translation + delta[_POS]),
                   velocity=state.velocity + delta[_VEL],
                   gyro_bias=state.gyro_bias + delta[_BG],
                   accel_bias=state.accel_bias + delta[_BA])


def downsample_grid(points: np.ndarray, grid: float) -> np.ndarray:
    """Keep the first point per grid cell, preserving input order."""
    if len(points) == 0 or grid <= 0:
        return points
    keys = np.floor(points / grid).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(first)]


def _fit_plane(neighbors: np.ndarray, max_ratio: float, max_thickness: float):
    """Centroid/normal of a neighbourhood, or None if not planar enough.

    Rejects on the smallest/middle eigenvalue ratio and on the absolute
    off-plane spread; the ratio alone admits mixed-surface neighbourhoods
    (e.g. wall plus floor near a corner) whenever the in-plane extent is
    large, and those pseudo-planes bias the pose.
    """
    centroid = neighbors.mean(axis=0)
    centered = neighbors - centroid
    cov = centered.T @ centered / len(neighbors)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 0 or evals[0] > max_ratio * evals[1]:
        return None
    if evals[0] > max_thickness * max_thickness:
        return None
    if evals[1] < _MIN_INPLANE_SPREAD ** 2:
        # near-collinear neighbourhood: the normal is unconstrained around
        # the line axis, so any plane through it is fabricated
        return None
    return centroid, evecs[:, 0], evecs[:, 1:], evals[1:]


def register(points_lidar: np.ndarray, world_map: VoxelMap, predicted: NavState,
             lidar_to_body: RigidTransform,
             config: LioConfig) -> tuple[NavState, RegistrationInfo]:
    """Iterated point-to-plane update of the predicted state against the map.

    Points are motion-compensated coordinates in the LiDAR frame at the sweep
    cut. An empty map skips the update (bootstrap); fewer than
    ``min_correspondences`` valid planes falls back to the prediction with the
    pose covariance block inflated.
    """
    n_input = len(points_lidar)
    if len(world_map.cells) == 0:
        return predicted, RegistrationInfo(status="bootstrap", n_input=n_input)

    pts = downsample_grid(np.asarray(points_lidar, dtype=float), config.downsample_grid)
    n_used = len(pts)
    if n_used == 0:
        return predicted, RegistrationInfo(status="degenerate", n_input=n_input)

    P0 = predicted.covariance
    P0_inv = np.linalg.inv(P0 + 1e-12 * np.eye(15))
    inv_r2 = 1.0 / (config.sigma_lidar ** 2)
    lr = lidar_to_body.rotation.as_matrix()
    lt = lidar_to_body.translation
    body_pts = pts @ lr.T + lt  # constant: lidar points in the body frame

    state = predicted
    delta = np.zeros(15)
    unseen = object()
    plane_cache = world_map.plane_cache
    H_last = None
    K_last = None
    n_corr = 0
    rms = float("nan")
    iterations = 0

    for it in range(config.max_iterations):
        iterations = it + 1
        R = state.pose.rotation.as_matrix()
        t = state.pose.translation
        world_pts = body_pts @ R.T + t

        keys = world_map.voxel_indices(world_pts)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        n_uniq = len(uniq)
        cents = np.zeros((n_uniq, 3))
        norms = np.zeros((n_uniq, 3))
        inplanes = np.zeros((n_uniq, 3, 2))
        spreads = np.ones((n_uniq, 2))
        valid_u = np.zeros(n_uniq, dtype=bool)
        for u_i, key in enumerate(map(tuple, uniq.tolist())):
            plane = plane_cache.get(key, unseen)
            if plane is unseen:
                neigh = world_map.neighbor_points(key)
                plane = (None if len(neigh) < config.min_plane_points
                         else _fit_plane(neigh, config.planarity_max_ratio,
                                         config.max_plane_thickness))
                plane_cache[key] = plane
            if plane is None:
                continue
            valid_u[u_i] = True
            cents[u_i], norms[u_i], inplanes[u_i], spreads[u_i] = plane

        norm_p = norms[inverse]
        diff = world_pts - cents[inverse]
        r_all = np.einsum("ij,ij->i", diff, norm_p)
        q_in = np.einsum("ij,ijk->ik", diff, inplanes[inverse])
        sp = spreads[inverse]
        # only interpolate: the query must fall inside the neighbourhood's
        # in-plane footprint, else the fit says nothing about it
        mask = (valid_u[inverse]
                & (np.abs(r_all) <= config.max_point_residual)
                & (q_in[:, 0] ** 2 / sp[:, 0] + q_in[:, 1] ** 2 / sp[:, 1]
                   <= _FOOTPRINT_CHI2))

        n_corr = int(mask.sum())
        if n_corr < config.min_correspondences:
            P = predicted.covariance.copy()
            P[:6, :6] *= config.degenerate_inflation
            log.warning("registration degenerate: %d correspondences", n_corr)
            return replace(predicted, covariance=P), RegistrationInfo(
                status="degenerate", n_input=n_input, n_used=n_used,
                n_correspondences=n_corr)

        nsel = norm_p[mask]
        H = np.zeros((n_corr, 15))
        # row form of -n^T R [b]x via the triple-product identity
        H[:, _THETA] = -np.cross(nsel @ R, body_pts[mask])
        H[:, _POS] = nsel
        r_vec = r_all[mask]
        rms = float(np.sqrt(np.mean(r_vec ** 2)))

        # Huber reweighting so an occasional bad plane cannot steer the fit
        delta_h = 3.0 * config.sigma_lidar
        absr = np.abs(r_vec)
        w = np.where(absr <= delta_h, 1.0, delta_h / np.maximum(absr, 1e-12))
        Hw = H * w[:, None]
        A = Hw.T @ H * inv_r2 + P0_inv
        K = np.linalg.solve(A, Hw.T * inv_r2)
        delta_new = K @ (H @ delta - r_vec)
        step = delta_new - delta
        state = _boxplus(predicted, delta_new)
        delta = delta_new
        H_last, K_last = H, K
        if float(np.linalg.norm(step)) < config.convergence_tol:
            break

    P = (np.eye(15) - K_last @ H_last) @ P0
    P = 0.5 * (P + P.T)
    state = replace(state, covariance=P)
    return state, RegistrationInfo(status="ok", n_input=n_input, n_used=n_used,
                                   n_correspondences=n_corr, rms=rms,
                                   iterations=iterations)
