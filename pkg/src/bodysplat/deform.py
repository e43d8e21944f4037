"""Canonical-to-observation deformation of Gaussians via forward LBS.

Each Gaussian samples bone weights at its canonical mean, blends the bone
transforms into a 4x4 matrix D, and gets its position mapped through D. The
blended linear block is generally not an exact rotation, so the orientation is
composed with the polar rotation factor of that block (the closest rotation in
Frobenius norm). Scales, opacities and SH coefficients are untouched.

The backward pass hand-chains gradients from observation-space positions and
quaternions to canonical parameters and to the pose vector; the spatial
dependence of the sampled weights is deliberately treated as locally constant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quat
from .errors import DegenerateDeformationError, InvalidParameterError
from .gaussians import CANONICAL, OBSERVATION, GaussianSet
from .skinning import (
    PoseParams,
    ShapeParams,
    Skeleton,
    SkinWeightGrid,
    bone_transform_jacobians,
    bone_transforms,
    lbs_transform,
    sample_weights,
)

_DEGENERATE_DET = 1e-12


def polar_rotation_batch(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closest rotations to a stack of matrices (N, 3, 3) plus S = R^T A.

    Uses Higham's Newton iteration X <- (X + X^-T)/2, which converges
    quadratically for the near-rigid blends LBS produces.
    """
    A = np.asarray(A, dtype=np.float64)
    det = np.linalg.det(A)
    bad = det <= _DEGENERATE_DET
    if np.any(bad):
        i = int(np.argmax(bad))
        raise DegenerateDeformationError(i, float(det[i]))
    X = A
    for _ in range(50):
        Xn = 0.5 * (X + np.swapaxes(np.linalg.inv(X), -1, -2))
        if np.max(np.abs(Xn - X)) < 1e-15:
            X = Xn
            break
        X = Xn
    S = np.swapaxes(X, -1, -2) @ A
    return X, 0.5 * (S + np.swapaxes(S, -1, -2))


def polar_rotation(A: np.ndarray, index: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Single-matrix wrapper around polar_rotation_batch."""
    try:
        R, S = polar_rotation_batch(np.asarray(A, dtype=np.float64)[None])
    except DegenerateDeformationError as exc:
        raise DegenerateDeformationError(index, exc.det) from None
    return R[0], S[0]


def polar_rotation_backward(R: np.ndarray, S: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """dL/dA for R = polar_rotation(A), given dL/dR.

    With dR = R [w]x the chain collapses to dL/dA = R [a]x where
    a = ((tr S) I - S)^-1 g and g is the rotational part of the incoming
    gradient, g = vee(skew(R^T grad_R)).
    """
    RtG = R.T @ grad_R
    g = 0.5 * np.array([RtG[2, 1] - RtG[1, 2], RtG[0, 2] - RtG[2, 0], RtG[1, 0] - RtG[0, 1]])
    # dL/dw = 2g and w = 2 M^-1 vee(skew(R^T dA)); one factor of 2 lands here
    M = np.trace(S) * np.eye(3) - S
    a = np.linalg.solve(M, 2.0 * g)
    ax = np.array([
        [0.0, -a[2], a[1]],
        [a[2], 0.0, -a[0]],
        [-a[1], a[0], 0.0],
    ])
    return R @ ax


@dataclass
class DeformRecord:
    """Forward-pass cache consumed by deform_backward and the prior losses."""

    D: np.ndarray                 # (N, 4, 4) blended per-Gaussian transforms
    rotation_quats: np.ndarray    # (N, 4) unit quaternion of each D's polar factor
    weights: np.ndarray           # (N, n_bones) sampled at canonical means
    polar_R: np.ndarray           # (N, 3, 3)
    polar_S: np.ndarray           # (N, 3, 3) symmetric factors
    canonical_positions: np.ndarray
    canonical_rot_unit: np.ndarray  # (N, 4) normalized canonical quaternions
    canonical_rot_norm: np.ndarray  # (N, 1) norms of the raw canonical quaternions
    skeleton: Skeleton
    pose: PoseParams
    shape: ShapeParams

    def __len__(self) -> int:
        return self.D.shape[0]


@dataclass
class DeformGrads:
    positions: np.ndarray        # (N, 3) dL/d canonical means
    rotations: np.ndarray        # (N, 4) dL/d raw canonical quaternions
    joint_rotations: np.ndarray  # (n, 3) dL/d axis-angle pose
    root_translation: np.ndarray # (3,)


def deform_gaussians(
    canonical: GaussianSet,
    pose: PoseParams,
    shape: ShapeParams,
    skeleton: Skeleton,
    grid: SkinWeightGrid,
) -> tuple[GaussianSet, DeformRecord]:
    """Pose the canonical set into observation space (positions and rotations)."""
    if canonical.space != CANONICAL:
        raise InvalidParameterError("deform_gaussians expects a canonical-space set")
    canonical.validate()

    weights = sample_weights(grid, canonical.positions)     # (N, n_bones)
    bones = bone_transforms(skeleton, pose, shape)          # (n_bones, 4, 4)
    D = lbs_transform(weights, bones)                       # (N, 4, 4)

    xh = np.concatenate([canonical.positions, np.ones((len(canonical), 1))], axis=1)
    positions = np.einsum("nij,nj->ni", D[:, :3, :], xh)

    polar_R, polar_S = polar_rotation_batch(D[:, :3, :3])
    q_D = quat.from_rotmat(polar_R)

    rot_norm = np.linalg.norm(canonical.rotations, axis=1, keepdims=True)
    rot_unit = canonical.rotations / rot_norm
    rotations = quat.multiply(q_D, rot_unit)

    observed = GaussianSet(
        positions=positions,
        rotations=rotations,
        log_scales=canonical.log_scales.copy(),
        opacity_logits=canonical.opacity_logits.copy(),
        sh_coeffs=canonical.sh_coeffs.copy(),
        space=OBSERVATION,
    )
    record = DeformRecord(
        D=D,
        rotation_quats=q_D,
        weights=weights,
        polar_R=polar_R,
        polar_S=polar_S,
        canonical_positions=canonical.positions.copy(),
        canonical_rot_unit=rot_unit,
        canonical_rot_norm=rot_norm,
        skeleton=skeleton,
        pose=pose,
        shape=shape,
    )
    return observed, record


def deform_backward(
    record: DeformRecord,
    grad_positions: np.ndarray,
    grad_rotations: np.ndarray,
) -> DeformGrads:
    """Chain observation-space gradients back to canonical parameters and pose.

    grad_positions: (N, 3) w.r.t. observed means; grad_rotations: (N, 4)
    w.r.t. the observed raw quaternions.
    """
    n = len(record)
    grad_positions = np.asarray(grad_positions, dtype=np.float64)
    grad_rotations = np.asarray(grad_rotations, dtype=np.float64)
    if grad_positions.shape != (n, 3) or grad_rotations.shape != (n, 4):
        raise InvalidParameterError("gradient shapes do not match the forward record")

    A = record.D[:, :3, :3]
    xbar = record.canonical_positions

    # positions: x = A xbar + d, with w(xbar) held fixed
    grad_canon_pos = np.einsum("nji,nj->ni", A, grad_positions)
    grad_D = np.zeros((n, 4, 4))
    grad_D[:, :3, :3] = np.einsum("ni,nj->nij", grad_positions, xbar)
    grad_D[:, :3, 3] = grad_positions

    # rotations: r = q_D (x) rbar_unit
    q_D = record.rotation_quats
    rbar = record.canonical_rot_unit
    LR = quat.left_matrix(q_D) @ quat.right_matrix(rbar)    # (N, 4, 4)
    grad_rbar_unit = np.einsum("nij,ni->nj", quat.left_matrix(q_D), grad_rotations)
    g_omega = 0.5 * np.einsum("nij,ni->nj", LR, grad_rotations)[:, 1:]

    # the rotation reaches A only through its polar factor; map dL/dw onto A
    S = record.polar_S
    M = np.trace(S, axis1=1, axis2=2)[:, None, None] * np.eye(3) - S
    a = np.linalg.solve(M, g_omega[:, :, None])[:, :, 0]
    ax = np.zeros((n, 3, 3))
    ax[:, 0, 1], ax[:, 0, 2] = -a[:, 2], a[:, 1]
    ax[:, 1, 0], ax[:, 1, 2] = a[:, 2], -a[:, 0]
    ax[:, 2, 0], ax[:, 2, 1] = -a[:, 1], a[:, 0]
    grad_D[:, :3, :3] += record.polar_R @ ax

    # raw canonical quaternion through its normalization
    proj = grad_rbar_unit - rbar * np.sum(grad_rbar_unit * rbar, axis=1, keepdims=True)
    grad_canon_rot = proj / record.canonical_rot_norm

    # D = sum_k w_k B_k
    grad_B = np.einsum("nk,nij->kij", record.weights, grad_D)

    _, dB = bone_transform_jacobians(record.skeleton, record.pose, record.shape)
    grad_theta = np.einsum("kij,kmqij->mq", grad_B, dB)
    grad_root = grad_B[:, :3, 3].sum(axis=0)

    return DeformGrads(grad_canon_pos, grad_canon_rot, grad_theta, grad_root)
