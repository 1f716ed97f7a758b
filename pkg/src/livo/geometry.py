"""Rotations, rigid transforms, and IMU integration primitives.

Rotations are unit quaternions stored as (w, x, y, z) with w >= 0, so every
physical rotation has exactly one representation. Timestamps are plain float
seconds; comparisons across the package use TIME_EPS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .lio import NavState

TIME_EPS = 1e-9

# Below this angle (rad) the exp/log/slerp maps switch to series expansions.
_SMALL_ANGLE = 1e-8


# ---------------------------------------------------------------------------
# raw quaternion helpers (arrays in (w, x, y, z) order)

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < _SMALL_ANGLE:
        raise ValueError(f"degenerate quaternion with norm {n:.3e}")
    return q / n


def quat_canonical(q: np.ndarray) -> np.ndarray:
    # w >= 0 picks one representative of the double cover
    return -q if q[0] < 0.0 else q


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


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(1.0 + m[i, i] - m[j, j] - m[k, k], 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    return quat_canonical(quat_normalize(q))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate one vector or an (N, 3) stack by a single quaternion."""
    return np.asarray(v, dtype=float) @ quat_to_matrix(q).T


def quat_exp_rotvec(omega: np.ndarray) -> np.ndarray:
    """Quaternion of the rotation vector omega (axis * angle)."""
    omega = np.asarray(omega, dtype=float)
    angle = np.linalg.norm(omega)
    if angle < _SMALL_ANGLE:
        # sin(a/2)/a = 1/2 - a^2/48 + O(a^4)
        s = 0.5 - angle * angle / 48.0
    else:
        s = math.sin(0.5 * angle) / angle
    return quat_canonical(np.concatenate(([math.cos(0.5 * angle)], s * omega)))


def quat_log_rotvec(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion. Raises near the pi singularity."""
    q = quat_canonical(np.asarray(q, dtype=float))
    vn = np.linalg.norm(q[1:])
    angle = 2.0 * math.atan2(vn, q[0])
    if angle >= math.pi - 1e-6:
        raise ValueError(f"rotation angle {angle:.9f} rad is inside the log-map "
                         "singular band at pi")
    if vn < _SMALL_ANGLE:
        # a/sin(a/2) ~ 2 + a^2/12 for small a
        return q[1:] * (2.0 + angle * angle / 12.0)
    return q[1:] * (angle / vn)


def quat_slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    """Spherical-linear interpolation along the shorter arc, u in [0, 1]."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-12:
        out = (1.0 - u) * q0 + u * q1
        return quat_canonical(quat_normalize(out))
    theta = math.acos(min(dot, 1.0))
    s = math.sin(theta)
    out = (math.sin((1.0 - u) * theta) / s) * q0 + (math.sin(u * theta) / s) * q1
    return quat_canonical(quat_normalize(out))


def quat_slerp_many(q0: np.ndarray, q1: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise slerp of (N, 4) stacks; same arc/canonical rules as quat_slerp."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.array(q1, dtype=float)
    u = np.asarray(u, dtype=float)
    dot = np.einsum("ij,ij->i", q0, q1)
    neg = dot < 0.0
    q1[neg] = -q1[neg]
    dot = np.abs(dot)
    w0 = 1.0 - u
    w1 = u.copy()
    far = dot <= 1.0 - 1e-12
    if np.any(far):
        theta = np.arccos(np.minimum(dot[far], 1.0))
        s = np.sin(theta)
        w0[far] = np.sin((1.0 - u[far]) * theta) / s
        w1[far] = np.sin(u[far] * theta) / s
    out = w0[:, None] * q0 + w1[:, None] * q1
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    out[out[:, 0] < 0.0] *= -1.0
    return out


def quat_rotate_many(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate each row of v (N, 3) by the matching row of q (N, 4)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    t = 2.0 * np.cross(q[:, 1:], v)
    return v + q[:, :1] * t + np.cross(q[:, 1:], t)


# ---------------------------------------------------------------------------
# value types

class Rotation:
    """Unit-quaternion rotation with canonical (w >= 0) storage."""

    __slots__ = ("q",)

    def __init__(self, q):
        self.q = quat_canonical(quat_normalize(np.asarray(q, dtype=float)))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Rotation":
        return cls(quat_from_matrix(m))

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def __mul__(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_mul(self.q, other.q))

    def inverse(self) -> "Rotation":
        return Rotation(quat_conj(self.q))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return quat_rotate(self.q, v)

    def angle_to(self, other: "Rotation") -> float:
        """Geodesic distance in radians, safe at the pi singularity."""
        d = quat_canonical(quat_mul(quat_conj(self.q), other.q))
        return 2.0 * math.atan2(np.linalg.norm(d[1:]), abs(d[0]))

    def __repr__(self) -> str:
        w, x, y, z = self.q
        return f"Rotation(w={w:.6f}, x={x:.6f}, y={y:.6f}, z={z:.6f})"


def so3_exp(omega: np.ndarray) -> Rotation:
    """Exponential map from a rotation vector to a Rotation."""
    return Rotation(quat_exp_rotvec(omega))


def so3_log(rotation: Rotation) -> np.ndarray:
    """Logarithm map; raises ValueError when the angle is within 1e-6 of pi."""
    return quat_log_rotvec(rotation.q)


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: x_out = rotation * x_in + translation."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(Rotation.identity(), np.zeros(3))

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.rotation.apply(p) + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self applied after other: (self . other)(p) == self(other(p))."""
        return RigidTransform(self.rotation * other.rotation,
                              self.rotation.apply(other.translation) + self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        rinv = self.rotation.inverse()
        return RigidTransform(rinv, -rinv.apply(self.translation))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition with a-after-b application order."""
    return a.compose(b)


@dataclass(slots=True)
class ImuSample:
    """One inertial measurement: body rates (rad/s) and specific force (m/s^2)."""

    stamp: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(3)


# ---------------------------------------------------------------------------
# interpolation and integration

def interpolate_pose(p0: RigidTransform, t0: float,
                     p1: RigidTransform, t1: float, t: float) -> RigidTransform:
    """Pose at time t between (p0, t0) and (p1, t1).

    Rotation is slerped, translation linearly interpolated. t must lie in
    [t0, t1] up to TIME_EPS.
    """
    if t < t0 - TIME_EPS or t > t1 + TIME_EPS:
        raise ValueError(f"query stamp {t!r} outside interpolation span "
                         f"[{t0!r}, {t1!r}]")
    if t1 - t0 < TIME_EPS:
        return p0
    u = min(max((t - t0) / (t1 - t0), 0.0), 1.0)
    rot = Rotation(quat_slerp(p0.rotation.q, p1.rotation.q, u))
    trans = (1.0 - u) * p0.translation + u * p1.translation
    return RigidTransform(rot, trans)


def _midpoint_segments(t0: float, samples: list[ImuSample]):
    """Integration segments over (t0, last sample stamp].

    The leading segment holds the first sample's rates; interior segments use
    the average of their endpoint samples (midpoint rule for sampled rates).
    """
    prev_t = t0
    prev_s: ImuSample | None = None
    for s in samples:
        dt = s.stamp - prev_t
        if dt <= TIME_EPS:
            # at or before the running segment start: rate anchor only
            prev_s = s
            continue
        if prev_s is None:
            gyro, accel = s.gyro, s.accel
        else:
            gyro = 0.5 * (prev_s.gyro + s.gyro)
            accel = 0.5 * (prev_s.accel + s.accel)
        yield s.stamp, dt, gyro, accel
        prev_t = s.stamp
        prev_s = s


def imu_pose_timeline(state: "NavState", samples: list[ImuSample],
                      gravity: np.ndarray) -> list[tuple[float, RigidTransform]]:
    """Poses at the state stamp and at every sample stamp, by midpoint integration."""
    gravity = np.asarray(gravity, dtype=float).reshape(3)
    q = state.pose.rotation.q.copy()
    p = state.pose.translation.copy()
    v = state.velocity.copy()
    bg, ba = state.gyro_bias, state.accel_bias
    out = [(state.stamp, state.pose)]
    for stamp, dt, gyro, accel in _midpoint_segments(state.stamp, samples):
        w = gyro - bg
        a = accel - ba
        q_half = quat_mul(q, quat_exp_rotvec(w * (0.5 * dt)))
        a_world = quat_rotate(q_half, a) + gravity
        q = quat_canonical(quat_normalize(quat_mul(q, quat_exp_rotvec(w * dt))))
        p = p + v * dt + 0.5 * a_world * dt * dt
        v = v + a_world * dt
        out.append((stamp, RigidTransform(Rotation(q), p.copy())))
    return out


def integrate_imu(state: "NavState", samples: list[ImuSample],
                  gravity: np.ndarray) -> "NavState":
    """Advance a navigation state through IMU samples with midpoint integration.

    Sample stamps must lie in (state.stamp, target]; the returned state sits at
    the last sample stamp. Velocity is updated alongside pose; biases and
    covariance pass through unchanged.
    """
    if not samples:
        return state
    gravity = np.asarray(gravity, dtype=float).reshape(3)
    q = state.pose.rotation.q.copy()
    p = state.pose.translation.copy()
    v = state.velocity.copy()
    bg, ba = state.gyro_bias, state.accel_bias
    for _, dt, gyro, accel in _midpoint_segments(state.stamp, samples):
        w = gyro - bg
        a = accel - ba
        q_half = quat_mul(q, quat_exp_rotvec(w * (0.5 * dt)))
        a_world = quat_rotate(q_half, a) + gravity
        q = quat_canonical(quat_normalize(quat_mul(q, quat_exp_rotvec(w * dt))))
        p = p + v * dt + 0.5 * a_world * dt * dt
        v = v + a_world * dt
    return replace(state,
                   stamp=samples[-1].stamp,
                   pose=RigidTransform(Rotation(q), p),
                   velocity=v)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
