"""Synthetic sensor rig: planar scenes, smooth trajectories, ray-cast sensors.

LiDAR points are cast from the true pose at each point's own stamp, so raw
sweeps carry physical motion distortion. Camera exposures happen at
``stamp + time_offset`` on the shared clock, which is what makes the clock
offset recoverable downstream. IMU rates come from symmetric numeric
differentiation of the trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (ImuSample, RigidTransform, Rotation, quat_log_rotvec,
                       quat_mul, quat_conj, quat_slerp, quat_exp_rotvec, so3_exp)
from .sweep import ImageEvent, LidarPoint, RawSweep
from .vision import CameraParams, ImageFrame, TrackedFeature

_DIFF_H = 1e-5  # s, numeric differentiation step for trajectory rates


# ---------------------------------------------------------------------------
# scene

@dataclass
class Patch:
    """Finite rectangle with linear plus sinusoidal albedo in its own plane.

    The sinusoidal term gives images two-dimensional local structure, which
    point trackers need; a purely linear shade leaves them the aperture
    problem.
    """

    center: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    half_u: float
    half_v: float
    albedo: np.ndarray                 # RGB in [0, 255]
    grad_u: np.ndarray | None = None   # RGB change per meter along u
    grad_v: np.ndarray | None = None
    tex_amp: np.ndarray | None = None  # RGB amplitude of the sinusoid
    tex_freq: tuple[float, float] = (1.4, 1.1)  # cycles per meter along u, v

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        n = np.asarray(self.normal, dtype=float).reshape(3)
        self.normal = n / np.linalg.norm(n)
        u = np.asarray(self.u_axis, dtype=float).reshape(3)
        u = u - (u @ self.normal) * self.normal
        self.u_axis = u / np.linalg.norm(u)
        self.v_axis = np.cross(self.normal, self.u_axis)
        self.albedo = np.asarray(self.albedo, dtype=float).reshape(3)
        self.grad_u = (np.zeros(3) if self.grad_u is None
                       else np.asarray(self.grad_u, dtype=float).reshape(3))
        self.grad_v = (np.zeros(3) if self.grad_v is None
                       else np.asarray(self.grad_v, dtype=float).reshape(3))
        self.tex_amp = (np.zeros(3) if self.tex_amp is None
                        else np.asarray(self.tex_amp, dtype=float).reshape(3))

    def shade(self, uu: np.ndarray, vv: np.ndarray) -> np.ndarray:
        out = (self.albedo[None, :] + uu[:, None] * self.grad_u
               + vv[:, None] * self.grad_v)
        if self.tex_amp.any():
            ripple = (np.sin(2.0 * math.pi * self.tex_freq[0] * uu)
                      * np.sin(2.0 * math.pi * self.tex_freq[1] * vv))
            out = out + ripple[:, None] * self.tex_amp
        return out


@dataclass
class Scene:
    """A set of patches plus a background color for rays that miss."""

    patches: list[Patch]
    background: np.ndarray = field(default_factory=lambda: np.full(3, 40.0))

    def raycast(self, origins: np.ndarray, dirs: np.ndarray, t_min: float = 1e-3):
        """Nearest-hit query. Returns (ranges, hit mask, colors (N, 3))."""
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        n = len(dirs)
        if len(origins) == 1 and n > 1:
            origins = np.broadcast_to(origins, (n, 3))
        best_t = np.full(n, np.inf)
        colors = np.tile(np.asarray(self.background, dtype=float), (n, 1))
        for patch in self.patches:
            denom = dirs @ patch.normal
            safe = np.abs(denom) > 1e-12
            t = np.where(safe, ((patch.center - origins) @ patch.normal)
                         / np.where(safe, denom, 1.0), np.inf)
            hit = safe & (t > t_min) & (t < best_t)
            if not hit.any():
                continue
            pts = origins[hit] + t[hit, None] * dirs[hit]
            rel = pts - patch.center
            uu = rel @ patch.u_axis
            vv = rel @ patch.v_axis
            inside = (np.abs(uu) <= patch.half_u) & (np.abs(vv) <= patch.half_v)
            if not inside.any():
                continue
            idx = np.flatnonzero(hit)[inside]
            best_t[idx] = t[idx]
            colors[idx] = np.clip(patch.shade(uu[inside], vv[inside]), 0.0, 255.0)
        return best_t, np.isfinite(best_t), colors

    def color_at(self, points: np.ndarray, tol: float = 1e-3) -> np.ndarray:
        """True surface color for points lying on patches (ground-truth probe).

        Points farther than ``tol`` off every patch get the background color.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(points)
        colors = np.tile(np.asarray(self.background, dtype=float), (n, 1))
        best = np.full(n, tol)
        for patch in self.patches:
            rel = points - patch.center
            dist = np.abs(rel @ patch.normal)
            uu = rel @ patch.u_axis
            vv = rel @ patch.v_axis
            on = ((dist <= best) & (np.abs(uu) <= patch.half_u + tol)
                  & (np.abs(vv) <= patch.half_v + tol))
            if on.any():
                best[on] = dist[on]
                colors[on] = np.clip(patch.shade(uu[on], vv[on]), 0.0, 255.0)
        return colors

    @classmethod
    def box_room(cls, half_x: float = 10.0, half_y: float = 10.0,
                 floor_z: float = -2.0, ceil_z: float = 4.0,
                 shaded: bool = True, panels: bool = True) -> "Scene":
        """Inward-facing box interior with optional interior panels."""
        zc = 0.5 * (floor_z + ceil_z)
        hz = 0.5 * (ceil_z - floor_z)
        g = 6.0 if shaded else 0.0
        a = np.full(3, 35.0) if shaded else None
        patches = [
            Patch([half_x, 0, zc], [-1, 0, 0], [0, 1, 0], half_y, hz, [190, 90, 70],
                  grad_u=[g, 0, 0], grad_v=[0, g, 0], tex_amp=a, tex_freq=(1.4, 1.1)),
            Patch([-half_x, 0, zc], [1, 0, 0], [0, 1, 0], half_y, hz, [80, 170, 90],
                  grad_u=[0, g, 0], grad_v=[g, 0, 0], tex_amp=a, tex_freq=(1.2, 0.9)),
            Patch([0, half_y, zc], [0, -1, 0], [1, 0, 0], half_x, hz, [90, 110, 200],
                  grad_u=[0, 0, g], grad_v=[g, 0, 0], tex_amp=a, tex_freq=(1.0, 1.3)),
            Patch([0, -half_y, zc], [0, 1, 0], [1, 0, 0], half_x, hz, [200, 180, 80],
                  grad_u=[g, g, 0], grad_v=[0, 0, g], tex_amp=a, tex_freq=(1.5, 0.8)),
            Patch([0, 0, floor_z], [0, 0, 1], [1, 0, 0], half_x, half_y, [120, 120, 130],
                  grad_u=[g, 0, 0], grad_v=[0, g, 0], tex_amp=a, tex_freq=(0.9, 1.2)),
            Patch([0, 0, ceil_z], [0, 0, -1], [1, 0, 0], half_x, half_y, [225, 225, 215],
                  grad_u=[0, 0, g], grad_v=[g, 0, 0], tex_amp=a, tex_freq=(1.1, 1.0)),
        ]
        if panels:
            patches.append(Patch([7.0, 0.0, 1.0], [-1, 0, 0], [0, 1, 0], 2.0, 2.0,
                                 [150, 60, 160], grad_u=[0, g, g], tex_amp=a,
                                 tex_freq=(1.8, 1.6)))
            patches.append(Patch([0.0, -5.0, 0.5], [0, 1, 0], [1, 0, 0], 3.0, 1.5,
                                 [60, 150, 160], grad_v=[g, 0, g], tex_amp=a,
                                 tex_freq=(1.7, 1.4)))
        return cls(patches=patches)

    @classmethod
    def corner(cls, extent: float = 5.0) -> "Scene":
        """Three mutually orthogonal planes meeting at the origin."""
        e = extent
        h = 0.5 * e
        return cls(patches=[
            Patch([h, h, 0], [0, 0, 1], [1, 0, 0], h, h, [120, 120, 120]),
            Patch([h, 0, h], [0, 1, 0], [1, 0, 0], h, h, [160, 160, 160]),
            Patch([0, h, h], [1, 0, 0], [0, 1, 0], h, h, [200, 200, 200]),
        ])


# ---------------------------------------------------------------------------
# trajectories

class FunctionTrajectory:
    """Trajectory defined by an analytic pose function of time."""

    def __init__(self, fn):
        self._fn = fn

    def pose_at(self, t: float) -> RigidTransform:
        return self._fn(t)


def static_trajectory(pose: RigidTransform | None = None) -> FunctionTrajectory:
    pose = pose if pose is not None else RigidTransform.identity()
    return FunctionTrajectory(lambda t: pose)


def line_trajectory(velocity, yaw_rate: float = 0.0) -> FunctionTrajectory:
    """Constant-velocity, constant-yaw-rate motion from the identity pose."""
    v = np.asarray(velocity, dtype=float).reshape(3)

    def fn(t: float) -> RigidTransform:
        return RigidTransform(so3_exp(np.array([0.0, 0.0, yaw_rate * t])), v * t)

    return FunctionTrajectory(fn)


def smooth_loop_trajectory(radius: float = 4.0, duration: float = 30.0,
                           height_amp: float = 0.3,
                           pitch_amp: float = 0.04) -> FunctionTrajectory:
    """A closed horizontal loop that starts and ends at rest at the identity.

    The path phase s(t) = t/T - sin(2*pi*t/T)/(2*pi) has vanishing rate at
    both ends, so every derivative the IMU sees is bounded and the platform
    is stationary at t=0 and t=T.
    """
    two_pi = 2.0 * math.pi

    def fn(t: float) -> RigidTransform:
        tau = t / duration
        s = tau - math.sin(two_pi * tau) / two_pi
        phi = two_pi * s
        pos = np.array([radius * math.sin(phi),
                        radius * (1.0 - math.cos(phi)),
                        height_amp * math.sin(two_pi * s)])
        yaw = so3_exp(np.array([0.0, 0.0, phi]))
        pitch = so3_exp(np.array([0.0, pitch_amp * math.sin(2.0 * two_pi * s), 0.0]))
        return RigidTransform(yaw * pitch, pos)

    return FunctionTrajectory(fn)


class WaypointTrajectory:
    """Control poses interpolated C1-smoothly (cubic translation, blended rotation)."""

    def __init__(self, stamps, poses: list[RigidTransform]):
        if len(stamps) != len(poses) or len(poses) < 2:
            raise ValueError("need matching stamps and at least two poses")
        self.stamps = np.asarray(stamps, dtype=float)
        if np.any(np.diff(self.stamps) <= 0):
            raise ValueError("waypoint stamps must strictly increase")
        self.positions = np.stack([p.translation for p in poses])
        self.quats = np.stack([p.rotation.q for p in poses])
        # align neighbouring quaternions to the same hemisphere for blending
        for i in range(1, len(self.quats)):
            if self.quats[i] @ self.quats[i - 1] < 0:
                self.quats[i] = -self.quats[i]
        self._inner = [self._inner_quad(i) for i in range(len(poses))]

    def _inner_quad(self, i: int) -> np.ndarray:
        q = self.quats
        if i == 0 or i == len(q) - 1:
            return q[i]
        rel_next = quat_log_rotvec(quat_mul(quat_conj(q[i]), q[i + 1]))
        rel_prev = quat_log_rotvec(quat_mul(quat_conj(q[i]), q[i - 1]))
        return quat_mul(q[i], quat_exp_rotvec(-(rel_next + rel_prev) / 8.0))

    def pose_at(self, t: float) -> RigidTransform:
        ts = self.stamps
        t = float(np.clip(t, ts[0], ts[-1]))
        k = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2))
        span = ts[k + 1] - ts[k]
        u = (t - ts[k]) / span
        p = self.positions
        p_prev = p[k - 1] if k > 0 else 2 * p[0] - p[1]
        p_next = p[k + 2] if k + 2 < len(p) else 2 * p[-1] - p[-2]
        m0 = 0.5 * (p[k + 1] - p_prev)
        m1 = 0.5 * (p_next - p[k])
        u2, u3 = u * u, u * u * u
        pos = ((2 * u3 - 3 * u2 + 1) * p[k] + (u3 - 2 * u2 + u) * m0
               + (-2 * u3 + 3 * u2) * p[k + 1] + (u3 - u2) * m1)
        outer = quat_slerp(self.quats[k], self.quats[k + 1], u)
        inner = quat_slerp(self._inner[k], self._inner[k + 1], u)
        q = quat_slerp(outer, inner, 2.0 * u * (1.0 - u))
        return RigidTransform(Rotation(q), pos)


def trajectory_velocity(traj, t: float, h: float = _DIFF_H) -> np.ndarray:
    p0 = traj.pose_at(t - h).translation
    p1 = traj.pose_at(t + h).translation
    return (p1 - p0) / (2.0 * h)


# ---------------------------------------------------------------------------
# rig and noise

def _default_camera_rotation() -> Rotation:
    # camera optical axis along body +x, image right along body -y, down along -z
    return Rotation.from_matrix(np.array([[0.0, 0.0, 1.0],
                                          [-1.0, 0.0, 0.0],
                                          [0.0, -1.0, 0.0]]))


@dataclass
class SensorRig:
    """True sensor layout, rates, and camera model of the simulated platform."""

    imu_rate_hz: float = 200.0
    lidar_sweep_hz: float = 10.0
    lidar_columns: int = 96
    lidar_rings: int = 16
    elevation_span_deg: float = 40.0
    max_range: float = 50.0
    camera_hz: float = 15.0
    width: int = 128
    height: int = 96
    fx: float = 64.0
    fy: float = 64.0
    cx: float = 63.5
    cy: float = 47.5
    lidar_to_body: RigidTransform = None
    camera_to_body: RigidTransform = None
    time_offset: float = 0.0
    grayscale: bool = False
    gravity: np.ndarray = None

    def __post_init__(self):
        if self.lidar_to_body is None:
            self.lidar_to_body = RigidTransform(Rotation.identity(),
                                                np.array([0.05, 0.0, 0.08]))
        if self.camera_to_body is None:
            self.camera_to_body = RigidTransform(_default_camera_rotation(),
                                                 np.array([0.08, 0.02, -0.03]))
        self.gravity = (np.array([0.0, 0.0, -9.81]) if self.gravity is None
                        else np.asarray(self.gravity, dtype=float).reshape(3))

    def true_camera_params(self) -> CameraParams:
        return CameraParams(time_offset=self.time_offset,
                            extrinsic=self.camera_to_body,
                            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy)


@dataclass
class SensorNoise:
    """Noise densities and fixed biases; all zeros means ideal sensors."""

    gyro_density: float = 0.0          # rad/s/sqrt(Hz)
    accel_density: float = 0.0         # m/s^2/sqrt(Hz)
    gyro_bias: np.ndarray = None
    accel_bias: np.ndarray = None
    range_sigma: float = 0.0           # m
    pixel_sigma: float = 0.0           # intensity levels
    seed: int = 0

    def __post_init__(self):
        self.gyro_bias = (np.zeros(3) if self.gyro_bias is None
                          else np.asarray(self.gyro_bias, dtype=float).reshape(3))
        self.accel_bias = (np.zeros(3) if self.accel_bias is None
                           else np.asarray(self.accel_bias, dtype=float).reshape(3))


# ---------------------------------------------------------------------------
# samplers

def _body_rates(traj, t: float, gravity: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """True body angular rate and specific force at time t."""
    h = _DIFF_H
    pose_m = traj.pose_at(t - h)
    pose_0 = traj.pose_at(t)
    pose_p = traj.pose_at(t + h)
    dq = quat_mul(quat_conj(pose_m.rotation.q), pose_p.rotation.q)
    omega = quat_log_rotvec(dq) / (2.0 * h)
    a_world = (pose_p.translation - 2.0 * pose_0.translation
               + pose_m.translation) / (h * h)
    force = pose_0.rotation.inverse().apply(a_world - gravity)
    return omega, force


def sample_imu(traj, rig: SensorRig, noise: SensorNoise,
               t0: float, t1: float) -> list[ImuSample]:
    """IMU stream on the exact grid t0 + k / rate, k = 1, 2, ..."""
    rng = np.random.default_rng([noise.seed, 1])
    sigma_g = noise.gyro_density * math.sqrt(rig.imu_rate_hz)
    sigma_a = noise.accel_density * math.sqrt(rig.imu_rate_hz)
    out = []
    k = 1
    while True:
        t = t0 + k / rig.imu_rate_hz
        if t > t1 + 1e-12:
            break
        omega, force = _body_rates(traj, t, rig.gravity)
        gyro = omega + noise.gyro_bias
        accel = force + noise.accel_bias
        if sigma_g > 0:
            gyro = gyro + rng.normal(0.0, sigma_g, 3)
        if sigma_a > 0:
            accel = accel + rng.normal(0.0, sigma_a, 3)
        out.append(ImuSample(t, gyro, accel))
        k += 1
    return out


def sample_lidar(traj, rig: SensorRig, scene: Scene, noise: SensorNoise,
                 t0: float, t1: float) -> list[RawSweep]:
    """Spinning-scanner sweeps; every column is cast from its own true pose."""
    rng = np.random.default_rng([noise.seed, 2])
    n_col, n_ring = rig.lidar_columns, rig.lidar_rings
    elevations = np.linspace(-0.5, 0.5, n_ring) * math.radians(rig.elevation_span_deg)
    azimuths = 2.0 * math.pi * np.arange(n_col) / n_col
    # sensor-frame directions, one block of rings per column
    dirs_l = np.stack([np.outer(np.cos(azimuths), np.cos(elevations)).ravel(),
                       np.outer(np.sin(azimuths), np.cos(elevations)).ravel(),
                       np.tile(np.sin(elevations), n_col)], axis=1)
    n_sweeps = int(round((t1 - t0) * rig.lidar_sweep_hz))
    ticks = rig.lidar_sweep_hz * n_col
    sweeps = []
    for j in range(n_sweeps):
        begin = t0 + j / rig.lidar_sweep_hz
        end = t0 + (j + 1) / rig.lidar_sweep_hz
        stamps = t0 + (j * n_col + np.arange(n_col)) / ticks
        origins = np.empty((n_col * n_ring, 3))
        dirs_w = np.empty((n_col * n_ring, 3))
        for c, t in enumerate(stamps):
            lidar_pose = traj.pose_at(t).compose(rig.lidar_to_body)
            rows = slice(c * n_ring, (c + 1) * n_ring)
            origins[rows] = lidar_pose.translation
            dirs_w[rows] = dirs_l[rows] @ lidar_pose.rotation.as_matrix().T
        ranges, hit, colors = scene.raycast(origins, dirs_w)
        if noise.range_sigma > 0:
            ranges = ranges + rng.normal(0.0, noise.range_sigma, len(ranges))
        keep = hit & (ranges <= rig.max_range)
        points = [LidarPoint(position=ranges[i] * dirs_l[i],
                             stamp=float(stamps[i // n_ring]),
                             intensity=float(colors[i].mean() / 255.0))
                  for i in np.flatnonzero(keep)]
        sweeps.append(RawSweep(points=points, begin=begin, end=end))
    return sweeps


def render_view(scene: Scene, rig: SensorRig, camera_pose: RigidTransform,
                rng=None, pixel_sigma: float = 0.0) -> np.ndarray:
    """Ray-cast an RGB (or gray) image from a world camera pose."""
    us, vs = np.meshgrid(np.arange(rig.width), np.arange(rig.height))
    dirs_c = np.stack([(us.ravel() - rig.cx) / rig.fx,
                       (vs.ravel() - rig.cy) / rig.fy,
                       np.ones(us.size)], axis=1)
    dirs_c /= np.linalg.norm(dirs_c, axis=1, keepdims=True)
    dirs_w = dirs_c @ camera_pose.rotation.as_matrix().T
    _, _, colors = scene.raycast(camera_pose.translation[None, :], dirs_w)
    img = colors.reshape(rig.height, rig.width, 3)
    if rig.grayscale:
        img = img @ np.array([0.299, 0.587, 0.114])
    if pixel_sigma > 0 and rng is not None:
        img = img + rng.normal(0.0, pixel_sigma, img.shape)
    return np.clip(img, 0.0, 255.0).astype(np.float32)


def sample_camera(traj, rig: SensorRig, scene: Scene, noise: SensorNoise,
                  t0: float, t1: float) -> list[ImageFrame]:
    """Frames stamped on the grid t0 + k / rate; exposure happens at
    stamp + time_offset, so the content trails the stamp by the true offset."""
    rng = np.random.default_rng([noise.seed, 3])
    frames = []
    k = 1
    while True:
        stamp = t0 + k / rig.camera_hz
        if stamp > t1 + 1e-12 or stamp + rig.time_offset > t1 + 1e-12:
            break
        pose = traj.pose_at(stamp + rig.time_offset).compose(rig.camera_to_body)
        pixels = render_view(scene, rig, pose, rng=rng, pixel_sigma=noise.pixel_sigma)
        frames.append(ImageFrame(stamp=stamp, pixels=pixels))
        k += 1
    return frames


def oracle_correspondences(points_world: np.ndarray, traj, rig: SensorRig,
                           t_prev: float, t_cur: float,
                           margin: float = 2.0) -> list[TrackedFeature]:
    """Exact feature tracks between two stamps under the true camera model.

    Observed pixels are the projections at the true exposure instants
    (stamp + time_offset). Points behind the camera or outside the image in
    either frame are excluded.
    """
    from .vision import projection_system

    params = rig.true_camera_params()
    points_world = np.atleast_2d(np.asarray(points_world, dtype=float))
    pixels = []
    valids = []
    for t in (t_prev, t_cur):
        nav = traj.pose_at(t + rig.time_offset)
        pix, _, _, valid = projection_system(params, nav, points_world, None, None)
        inside = ((pix[:, 0] >= margin) & (pix[:, 0] <= rig.width - 1 - margin)
                  & (pix[:, 1] >= margin) & (pix[:, 1] <= rig.height - 1 - margin))
        pixels.append(pix)
        valids.append(valid & inside)
    ok = valids[0] & valids[1]
    return [TrackedFeature(position=points_world[i],
                           prev_pixel=pixels[0][i], cur_pixel=pixels[1][i])
            for i in np.flatnonzero(ok)]


def image_events(frames: list[ImageFrame]) -> list[ImageEvent]:
    return [ImageEvent(stamp=f.stamp, frame=f) for f in frames]
