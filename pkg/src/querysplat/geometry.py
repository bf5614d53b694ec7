"""Quaternion / rotation helpers shared by the rasterizer, scenes and pose code.

Quaternions use (w, x, y, z) ordering. Cameras look down +z with x right and
y down, so `look_at` uses up = -y conventions internally.
"""

from __future__ import annotations

import numpy as np


def quat_normalize(q: np.ndarray, fallback_eps: float = 1e-8) -> np.ndarray:
    """Normalize quaternions (..., 4); rows with norm < fallback_eps become identity."""
    q = np.asarray(q, dtype=np.result_type(q, np.float32))
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    out = np.where(norm < fallback_eps, np.array([1.0, 0.0, 0.0, 0.0], dtype=q.dtype), q / np.maximum(norm, fallback_eps))
    return out


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) -> rotation matrices (..., 3, 3)."""
    q = np.asarray(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
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


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix (3, 3) -> unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of quaternions (..., 4) x (..., 4)."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Axis-angle vector (3,) -> rotation matrix via Rodrigues' formula."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = np.array(
        [
            [0.0, -omega[2], omega[1]],
            [omega[2], 0.0, -omega[0]],
            [-omega[1], omega[0], 0.0],
        ]
    )
    if theta < 1e-12:
        return np.eye(3) + K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle in degrees between two rotation matrices."""
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def look_at_rotation(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera rotation for a camera at `eye` looking at `target`.

    Rows are (right, down, forward) expressed in world coordinates. World +y
    is down (matching the y-down image convention), so a camera looking along
    +z gets exactly the identity rotation.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    world_down = np.array([0.0, 1.0, 0.0])
    right = np.cross(world_down, fwd)
    n = np.linalg.norm(right)
    if n < 1e-9:
        # Looking straight up/down; pick an arbitrary right axis.
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / n
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=0)
