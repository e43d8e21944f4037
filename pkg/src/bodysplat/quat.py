"""Quaternion helpers.

Convention everywhere: (w, x, y, z) scalar-first, arrays of shape (..., 4).
Rotation matrices act on column vectors.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError


def normalize(q: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Return q / |q|. Raises on zero-norm input unless eps > 0."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if eps == 0.0 and np.any(n == 0.0):
        raise InvalidParameterError("zero-norm quaternion")
    return q / np.maximum(n, eps if eps > 0.0 else np.finfo(np.float64).tiny)


def to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of q/|q|, shape (..., 3, 3)."""
    q = normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def _unit_rotmat_jacobian(q: np.ndarray) -> np.ndarray:
    """dR/dq for the unit-quaternion matrix formula, shape (..., 4, 3, 3).

    Treats the four components as independent; compose with the
    normalization Jacobian for raw quaternions.
    """
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    J = np.empty(q.shape[:-1] + (4, 3, 3), dtype=np.float64)
    # dR/dw
    J[..., 0, 0, 0] = zero
    J[..., 0, 0, 1] = -2.0 * z
    J[..., 0, 0, 2] = 2.0 * y
    J[..., 0, 1, 0] = 2.0 * z
    J[..., 0, 1, 1] = zero
    J[..., 0, 1, 2] = -2.0 * x
    J[..., 0, 2, 0] = -2.0 * y
    J[..., 0, 2, 1] = 2.0 * x
    J[..., 0, 2, 2] = zero
    # dR/dx
    J[..., 1, 0, 0] = zero
    J[..., 1, 0, 1] = 2.0 * y
    J[..., 1, 0, 2] = 2.0 * z
    J[..., 1, 1, 0] = 2.0 * y
    J[..., 1, 1, 1] = -4.0 * x
    J[..., 1, 1, 2] = -2.0 * w
    J[..., 1, 2, 0] = 2.0 * z
    J[..., 1, 2, 1] = 2.0 * w
    J[..., 1, 2, 2] = -4.0 * x
    # dR/dy
    J[..., 2, 0, 0] = -4.0 * y
    J[..., 2, 0, 1] = 2.0 * x
    J[..., 2, 0, 2] = 2.0 * w
    J[..., 2, 1, 0] = 2.0 * x
    J[..., 2, 1, 1] = zero
    J[..., 2, 1, 2] = 2.0 * z
    J[..., 2, 2, 0] = -2.0 * w
    J[..., 2, 2, 1] = 2.0 * z
    J[..., 2, 2, 2] = -4.0 * y
    # dR/dz
    J[..., 3, 0, 0] = -4.0 * z
    J[..., 3, 0, 1] = -2.0 * w
    J[..., 3, 0, 2] = 2.0 * x
    J[..., 3, 1, 0] = 2.0 * w
    J[..., 3, 1, 1] = -4.0 * z
    J[..., 3, 1, 2] = 2.0 * y
    J[..., 3, 2, 0] = 2.0 * x
    J[..., 3, 2, 1] = 2.0 * y
    J[..., 3, 2, 2] = zero
    return J


def rotmat_backward(q_raw: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Pull a gradient on R = to_rotmat(q_raw) back to the raw quaternion.

    q_raw: (..., 4) unnormalized; grad_R: (..., 3, 3). Returns (..., 4).
    """
    q_raw = np.asarray(q_raw, dtype=np.float64)
    n = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    qh = q_raw / n
    J = _unit_rotmat_jacobian(qh)  # (..., 4, 3, 3)
    grad_unit = np.einsum("...kij,...ij->...k", J, grad_R)
    # through q_hat = q / |q|:  (I - qh qh^T) / |q|
    proj = grad_unit - qh * np.sum(grad_unit * qh, axis=-1, keepdims=True)
    return proj / n


def multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product p ⊗ q, broadcasting over leading dims."""
    pw, px, py, pz = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )


def conjugate(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=np.float64, copy=True)
    out[..., 1:] *= -1.0
    return out


def left_matrix(p: np.ndarray) -> np.ndarray:
    """L(p) with p ⊗ q = L(p) @ q, shape (..., 4, 4)."""
    w, x, y, z = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    L = np.empty(p.shape[:-1] + (4, 4), dtype=np.float64)
    L[..., 0, 0], L[..., 0, 1], L[..., 0, 2], L[..., 0, 3] = w, -x, -y, -z
    L[..., 1, 0], L[..., 1, 1], L[..., 1, 2], L[..., 1, 3] = x, w, -z, y
    L[..., 2, 0], L[..., 2, 1], L[..., 2, 2], L[..., 2, 3] = y, z, w, -x
    L[..., 3, 0], L[..., 3, 1], L[..., 3, 2], L[..., 3, 3] = z, -y, x, w
    return L


def right_matrix(q: np.ndarray) -> np.ndarray:
    """R(q) with p ⊗ q = R(q) @ p, shape (..., 4, 4)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (4, 4), dtype=np.float64)
    R[..., 0, 0], R[..., 0, 1], R[..., 0, 2], R[..., 0, 3] = w, -x, -y, -z
    R[..., 1, 0], R[..., 1, 1], R[..., 1, 2], R[..., 1, 3] = x, w, z, -y
    R[..., 2, 0], R[..., 2, 1], R[..., 2, 2], R[..., 2, 3] = y, -z, w, x
    R[..., 3, 0], R[..., 3, 1], R[..., 3, 2], R[..., 3, 3] = z, y, -x, w
    return R


def from_rotmat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation matrix (Shepperd's method), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    single = R.ndim == 2
    Rb = R[None] if single else R.reshape(-1, 3, 3)
    n = Rb.shape[0]
    q = np.empty((n, 4), dtype=np.float64)
    tr = np.trace(Rb, axis1=1, axis2=2)
    diag = np.stack([Rb[:, 0, 0], Rb[:, 1, 1], Rb[:, 2, 2]], axis=1)
    # branch index: 0 -> trace, 1..3 -> dominant diagonal element
    cases = np.where(tr > 0.0, 0, np.argmax(diag, axis=1) + 1)
    for i in range(n):
        m = Rb[i]
        c = cases[i]
        if c == 0:
            s = np.sqrt(tr[i] + 1.0) * 2.0
            q[i] = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
                    (m[1, 0] - m[0, 1]) / s)
        elif c == 1:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q[i] = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s,
                    (m[0, 2] + m[2, 0]) / s)
        elif c == 2:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q[i] = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s,
                    (m[1, 2] + m[2, 1]) / s)
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q[i] = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                    (m[1, 2] + m[2, 1]) / s, 0.25 * s)
    neg = q[:, 0] < 0.0
    q[neg] *= -1.0
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q[0] if single else q.reshape(R.shape[:-2] + (4,))
