"""Rotation representations: SO(3) matrices, Euler angles and the continuous 6D encoding.

Euler angles use the extrinsic X-Y-Z convention, ``R = Rz(rz) @ Ry(ry) @ Rx(rx)``.
The 6D encoding is the first two columns of the matrix, stacked as ``(c1, c2)``;
decoding goes through Gram-Schmidt.

All functions accept batched input with arbitrary leading dimensions.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateSixD

SIXD_EPS = 1e-8
_GIMBAL_EPS = 1e-10


def rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w <= -np.pi, w + 2.0 * np.pi, w)


def euler_to_rotation(euler):
    """Euler angles ``(..., 3)`` as (rx, ry, rz) to rotation matrices ``(..., 3, 3)``."""
    e = np.asarray(euler, dtype=float)
    rx, ry, rz = e[..., 0], e[..., 1], e[..., 2]
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    r = np.empty(e.shape[:-1] + (3, 3))
    r[..., 0, 0] = cz * cy
    r[..., 0, 1] = cz * sy * sx - sz * cx
    r[..., 0, 2] = cz * sy * cx + sz * sx
    r[..., 1, 0] = sz * cy
    r[..., 1, 1] = sz * sy * sx + cz * cx
    r[..., 1, 2] = sz * sy * cx - cz * sx
    r[..., 2, 0] = -sy
    r[..., 2, 1] = cy * sx
    r[..., 2, 2] = cy * cx
    return r


def rotation_to_euler(r):
    """Inverse of :func:`euler_to_rotation`.

    At gimbal lock (``cos(ry) == 0`` up to rounding) ``rx`` is set to 0 and
    ``rz`` absorbs the free angle.
    """
    r = np.asarray(r, dtype=float)
    cy = np.hypot(r[..., 0, 0], r[..., 1, 0])
    ry = np.arctan2(-r[..., 2, 0], cy)
    locked = cy < _GIMBAL_EPS
    rx = np.where(locked, 0.0, np.arctan2(r[..., 2, 1], r[..., 2, 2]))
    rz = np.where(
        locked,
        np.arctan2(-r[..., 0, 1], r[..., 1, 1]),
        np.arctan2(r[..., 1, 0], r[..., 0, 0]),
    )
    return wrap_angle(np.stack([rx, ry, rz], axis=-1))


def rotation_to_sixd(r):
    r = np.asarray(r, dtype=float)
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def _gram_schmidt(v):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 6:
        raise DegenerateSixD(f"expected trailing dimension 6, got {v.shape}")
    a1, a2 = v[..., :3], v[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= SIXD_EPS):
        raise DegenerateSixD("first 6D column has (near) zero norm")
    b1 = a1 / n1
    proj = np.sum(b1 * a2, axis=-1, keepdims=True)
    w = a2 - proj * b1
    # second pass removes the residual b1 component left by cancellation
    w = w - np.sum(b1 * w, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(w, axis=-1, keepdims=True)
    if np.any(n2 <= SIXD_EPS):
        raise DegenerateSixD("6D columns are (near) parallel")
    b2 = w / n2
    b3 = np.cross(b1, b2)
    return a2, n1, b1, proj, w, n2, b2, b3


def sixd_to_rotation(v):
    """Decode 6D vectors ``(..., 6)`` into rotation matrices via Gram-Schmidt."""
    *_, b1, _, _, _, b2, b3 = _gram_schmidt(v)
    return np.stack([b1, b2, b3], axis=-1)


def sixd_to_rotation_grad(v, upstream):
    """Gradient of ``sum(upstream * sixd_to_rotation(v))`` with respect to ``v``."""
    a2, n1, b1, proj, w, n2, b2, b3 = _gram_schmidt(v)
    g = np.asarray(upstream, dtype=float)
    g1, g2, g3 = g[..., :, 0], g[..., :, 1], g[..., :, 2]

    def dot(a, b):
        return np.sum(a * b, axis=-1, keepdims=True)

    # b3 = b1 x b2
    gb1 = g1 + np.cross(b2, g3)
    gb2 = g2 + np.cross(g3, b1)
    gw = (gb2 - b2 * dot(b2, gb2)) / n2
    # w = a2 - (b1 . a2) b1
    ga2 = gw - b1 * dot(b1, gw)
    gb1 = gb1 - proj * gw - a2 * dot(b1, gw)
    ga1 = (gb1 - b1 * dot(b1, gb1)) / n1
    return np.concatenate([ga1, ga2], axis=-1)


def geodesic_angle(r1, r2):
    """Angle of the relative rotation ``r1.T @ r2`` in radians.

    Evaluated as ``atan2(|axis|, cos)`` which equals the clamped
    ``arccos((trace - 1) / 2)`` but keeps full precision near 0 and pi.
    """
    rel = np.swapaxes(np.asarray(r1, dtype=float), -1, -2) @ np.asarray(r2, dtype=float)
    cos = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    axis = np.stack(
        [
            rel[..., 2, 1] - rel[..., 1, 2],
            rel[..., 0, 2] - rel[..., 2, 0],
            rel[..., 1, 0] - rel[..., 0, 1],
        ],
        axis=-1,
    )
    sin = np.linalg.norm(axis, axis=-1) / 2.0
    return np.arctan2(sin, np.clip(cos, -1.0, 1.0))


def is_rotation(r, tol=1e-9):
    r = np.asarray(r, dtype=float)
    eye = np.eye(3)
    orth = np.linalg.norm(np.swapaxes(r, -1, -2) @ r - eye, axis=(-2, -1))
    det = np.linalg.det(r)
    return bool(np.all(orth < tol) and np.all(np.abs(det - 1.0) < tol))


# quaternions are (w, x, y, z), unit norm


def quat_to_rotation(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotation_to_quat(r):
    """Single-matrix conversion (Shepperd's method)."""
    m = np.asarray(r, dtype=float)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def slerp(r0, r1, frac):
    """Spherical interpolation from ``r0`` (frac=0) to ``r1`` (frac=1)."""
    q0, q1 = rotation_to_quat(r0), rotation_to_quat(r1)
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1, d = -q1, -d
    if d > 1.0 - 1e-12:
        q = q0 + frac * (q1 - q0)
    else:
        theta = np.arccos(d)
        q = (np.sin((1.0 - frac) * theta) * q0 + np.sin(frac * theta) * q1) / np.sin(theta)
    return quat_to_rotation(q)


def random_rotations(n, rng):
    """Haar-uniform rotations from normalized 4D Gaussian quaternions."""
    q = rng.standard_normal((n, 4))
    return quat_to_rotation(q / np.linalg.norm(q, axis=-1, keepdims=True))
