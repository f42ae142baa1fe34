"""Quaternion and rotation utilities.

Quaternions are stored scalar-first ``[w, x, y, z]`` and kept unit-norm.
Euler angles follow the intrinsic z-y'-x'' (yaw, pitch, roll) convention;
tuples are returned roll-first.
"""

from __future__ import annotations

import numpy as np


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix so that ``skew(a) @ b == np.cross(a, b)``."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero-norm quaternion")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector v by quaternion q (body -> world for a body pose)."""
    w = q[0]
    u = q[1:]
    # Rodrigues form, cheaper than building the matrix for a single vector.
    return v + 2.0 * np.cross(u, np.cross(u, v) + w * v)


def quat_rotate_inverse(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate v by the inverse of q (world -> body)."""
    return quat_rotate(quat_conj(q), v)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("zero-norm axis")
    half = 0.5 * angle
    q = np.empty(4)
    q[0] = np.cos(half)
    q[1:] = np.sin(half) * axis / n
    return q


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) to quaternion."""
    angle = float(np.linalg.norm(rv))
    q = np.empty(4)
    half = 0.5 * angle
    q[0] = np.cos(half)
    if angle < 1e-12:
        # sin(x/2)/x -> 1/2 - x^2/48, keeps the map smooth through zero
        q[1:] = rv * (0.5 - angle * angle / 48.0)
    else:
        q[1:] = rv * (np.sin(half) / angle)
    return q


def quat_integrate(q: np.ndarray, omega_world: np.ndarray, dt: float) -> np.ndarray:
    """Advance orientation by a world-frame angular velocity over dt."""
    dq = quat_from_rotvec(np.asarray(omega_world) * dt)
    return quat_normalize(quat_mul(dq, q))


def quat_from_euler(roll: float, pitch: float, yaw: float) -> np.ndarray:
    qz = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw)
    qy = quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), pitch)
    qx = quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), roll)
    return quat_mul(qz, quat_mul(qy, qx))


def euler_from_quat(q: np.ndarray) -> tuple[float, float, float]:
    """Return (roll, pitch, yaw). At the pitch = +-pi/2 singularity roll is
    folded into yaw (roll reported as 0)."""
    w, x, y, z = q
    sinp = 2.0 * (w * y - z * x)
    sinp = min(1.0, max(-1.0, sinp))
    if abs(sinp) >= 1.0 - 1e-9:
        return 0.0, float(np.arcsin(sinp)), float(2.0 * np.arctan2(z, w))
    roll = np.arctan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    pitch = np.arcsin(sinp)
    yaw = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    return float(roll), float(pitch), float(yaw)


def projected_gravity(q: np.ndarray) -> np.ndarray:
    """Unit gravity direction expressed in the body frame."""
    return quat_rotate_inverse(q, np.array([0.0, 0.0, -1.0]))


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    out = (a + np.pi) % (2.0 * np.pi) - np.pi
    if out == -np.pi:
        out = np.pi
    return float(out)
