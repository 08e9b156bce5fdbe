"""SO(3) helpers shared by the simulator, the task environment and MPPI.

Every function accepts arrays with arbitrary leading batch dimensions:
vectors are ``(..., 3)`` and matrices ``(..., 3, 3)``.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]

_SMALL_ANGLE = 1e-6


def hat(v: Array) -> Array:
    """Skew-symmetric matrix such that ``hat(v) @ w == cross(v, w)``."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: Array) -> Array:
    """Inverse of :func:`hat` (reads the skew part only)."""
    m = np.asarray(m, dtype=np.float64)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def cross(a: Array, b: Array) -> Array:
    """``np.cross`` for trailing 3-vectors, without the axis bookkeeping."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def matvec(m: Array, v: Array) -> Array:
    return np.einsum("...ij,...j->...i", m, v)


def matTvec(m: Array, v: Array) -> Array:
    return np.einsum("...ji,...j->...i", m, v)


def matmul(a: Array, b: Array) -> Array:
    return np.einsum("...ij,...jk->...ik", a, b)


def matTmul(a: Array, b: Array) -> Array:
    """``a.T @ b`` over the trailing two axes."""
    return np.einsum("...ji,...jk->...ik", a, b)


def exp_so3(rotvec: Array) -> Array:
    """Rodrigues' formula; a Taylor expansion is used below 1e-6 rad."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(rotvec, axis=-1)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    k = hat(rotvec)
    kk = matmul(k, k)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * kk


def log_so3(rot: Array) -> Array:
    """Rotation vector of ``rot``; valid for angles in [0, pi)."""
    rot = np.asarray(rot, dtype=np.float64)
    theta = geodesic_angle(rot)
    skew = vee(rot - np.swapaxes(rot, -1, -2))
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    scale = np.where(small, 0.5 + theta**2 / 12.0, safe / (2.0 * np.sin(safe)))
    near_pi = theta > np.pi - 1e-6
    out = scale[..., None] * skew
    if np.any(near_pi):
        # axis from the symmetric part when sin(theta) vanishes
        sym = 0.5 * (rot + np.eye(3))
        idx = np.argmax(np.diagonal(sym, axis1=-2, axis2=-1), axis=-1)
        col = np.take_along_axis(sym, idx[..., None, None].repeat(3, axis=-2), axis=-1)[..., 0]
        axis = col / np.linalg.norm(col, axis=-1, keepdims=True)
        out = np.where(near_pi[..., None], axis * theta[..., None], out)
    return out


def geodesic_angle(rot: Array) -> Array:
    """Angle of a rotation matrix, ``arccos((tr R - 1) / 2)``."""
    tr = np.trace(rot, axis1=-2, axis2=-1)
    return np.arccos(np.clip(0.5 * (tr - 1.0), -1.0, 1.0))


def axis_angle(axis: Array, angle: Array) -> Array:
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    return exp_so3(axis * angle[..., None])


def rpy_to_matrix(rpy: Array) -> Array:
    """Roll-pitch-yaw (x, y, z) to ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    rpy = np.asarray(rpy, dtype=np.float64)
    cr, sr = np.cos(rpy[..., 0]), np.sin(rpy[..., 0])
    cp, sp = np.cos(rpy[..., 1]), np.sin(rpy[..., 1])
    cy, sy = np.cos(rpy[..., 2]), np.sin(rpy[..., 2])
    out = np.empty(rpy.shape[:-1] + (3, 3))
    out[..., 0, 0] = cy * cp
    out[..., 0, 1] = cy * sp * sr - sy * cr
    out[..., 0, 2] = cy * sp * cr + sy * sr
    out[..., 1, 0] = sy * cp
    out[..., 1, 1] = sy * sp * sr + cy * cr
    out[..., 1, 2] = sy * sp * cr - cy * sr
    out[..., 2, 0] = -sp
    out[..., 2, 1] = cp * sr
    out[..., 2, 2] = cp * cr
    return out


def gram_schmidt(l0: Array, l1: Array, eps: float = 1e-8) -> tuple[Array, NDArray[np.bool_]]:
    """Build ``[e0, e1, e0 x e1]`` (as columns) from two 3-vectors.

    Returns the rotation and a boolean mask flagging degenerate inputs
    (``|l0| <= eps`` or the projected ``l1`` shorter than ``eps``). Degenerate
    entries are replaced by the identity.
    """
    l0 = np.asarray(l0, dtype=np.float64)
    l1 = np.asarray(l1, dtype=np.float64)
    n0 = np.linalg.norm(l0, axis=-1, keepdims=True)
    e0 = l0 / np.where(n0 > eps, n0, 1.0)
    u1 = l1 - np.sum(e0 * l1, axis=-1, keepdims=True) * e0
    n1 = np.linalg.norm(u1, axis=-1, keepdims=True)
    e1 = u1 / np.where(n1 > eps, n1, 1.0)
    e2 = cross(e0, e1)
    rot = np.stack([e0, e1, e2], axis=-1)
    degenerate = (n0[..., 0] <= eps) | (n1[..., 0] <= eps)
    if np.any(degenerate):
        rot = np.where(degenerate[..., None, None], np.eye(3), rot)
    return rot, degenerate


def orthonormalize(rot: Array) -> Array:
    """Project a nearly-orthonormal matrix back onto SO(3).

    Columns are re-derived by Gram-Schmidt on the first two; the drift per
    integration step is O(dt^2) so this is indistinguishable from the polar
    projection at the tolerances we care about.
    """
    rot, _ = gram_schmidt(rot[..., :, 0], rot[..., :, 1], eps=0.0)
    return rot
