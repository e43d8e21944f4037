"""Articulated skinned body: joint hierarchy, bone transforms, weight grid, LBS.

The skeleton stands in for a licensed parametric body model: a joint tree with
rigid rest transforms, axis-angle pose parameters per joint plus a global root
translation, and a fixed 10-vector shape code consumed as per-bone rest-length
scale factors (bone i uses 1 + beta[i mod 10]; the root offset is untouched).

Bone transforms follow the usual skinning construction
    B_i = T(root_translation) @ G_i(pose) @ G_i(rest)^-1
so the rest pose maps every point to itself.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidParameterError

WEIGHT_SUM_TOL = 1e-6
NN_SPLAT_K = 8          # template vertices blended into each seeded grid node
NN_SPLAT_EPS = 1e-8     # inverse-distance guard
DEFAULT_GRID_RESOLUTION = (64, 64, 64)
DEFAULT_DILATION_STEPS = 4
BBOX_PADDING = 0.10


# ---------------------------------------------------------------------------
# axis-angle rotations

def rodrigues(v: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (batched over leading dims)."""
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    vb = v.reshape(-1, 3)
    phi = np.linalg.norm(vb, axis=1)
    K = _cross_matrix(vb)
    K2 = K @ K
    R = np.empty((vb.shape[0], 3, 3))
    small = phi < 1e-8
    if np.any(small):
        R[small] = np.eye(3) + K[small] + 0.5 * K2[small]
    big = ~small
    if np.any(big):
        p = phi[big]
        a = (np.sin(p) / p)[:, None, None]
        b = ((1.0 - np.cos(p)) / (p * p))[:, None, None]
        R[big] = np.eye(3) + a * K[big] + b * K2[big]
    return R[0] if single else R.reshape(v.shape[:-1] + (3, 3))


def rodrigues_jacobian(v: np.ndarray) -> np.ndarray:
    """dR/dv as (3, 3, 3): leading index is the axis-angle component."""
    v = np.asarray(v, dtype=np.float64)
    phi = float(np.linalg.norm(v))
    J = np.empty((3, 3, 3))
    if phi < 1e-4:
        # series around the identity: dR/dv_q = [e_q]x + (Kx[e_q]x + [e_q]xKx)/2
        K = _cross_matrix(v)
        for q in range(3):
            E = _cross_matrix(np.eye(3)[q])
            J[q] = E + 0.5 * (K @ E + E @ K)
        return J
    R = rodrigues(v)
    K = _cross_matrix(v)
    for q in range(3):
        e = np.zeros(3)
        e[q] = 1.0
        w = np.cross(v, (np.eye(3) - R) @ e)
        J[q] = ((v[q] * K + _cross_matrix(w)) / (phi * phi)) @ R
    return J


def _cross_matrix(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    vb = v.reshape(-1, 3)
    K = np.zeros((vb.shape[0], 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -vb[:, 2], vb[:, 1]
    K[:, 1, 0], K[:, 1, 2] = vb[:, 2], -vb[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -vb[:, 1], vb[:, 0]
    return K[0] if single else K.reshape(v.shape[:-1] + (3, 3))


def _rigid_inverse(T: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    R = T[:3, :3]
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


# ---------------------------------------------------------------------------
# domain types

@dataclass
class Skeleton:
    parents: np.ndarray                # (n,) int, -1 for the single root
    rest_local_transforms: np.ndarray  # (n, 4, 4) rigid, joint frame in parent frame

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.rest_local_transforms = np.asarray(self.rest_local_transforms, dtype=np.float64)
        n = self.parents.shape[0]
        if n < 1:
            raise InvalidParameterError("skeleton needs at least one joint")
        if self.rest_local_transforms.shape != (n, 4, 4):
            raise InvalidParameterError("rest_local_transforms must be (n, 4, 4)")
        if self.parents[0] != -1 or np.any(self.parents[1:] < 0):
            raise InvalidParameterError("joint 0 must be the single root")
        if np.any(self.parents[1:] >= np.arange(1, n)):
            raise InvalidParameterError("parents must be topologically ordered (parents[i] < i)")
        for i, T in enumerate(self.rest_local_transforms):
            R = T[:3, :3]
            if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
                raise InvalidParameterError(f"rest transform of joint {i} is not rigid")
            if np.max(np.abs(T[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 0.0:
                raise InvalidParameterError(f"rest transform of joint {i} has a bad bottom row")

    @property
    def joint_count(self) -> int:
        return self.parents.shape[0]


@dataclass
class PoseParams:
    joint_rotations: np.ndarray  # (n, 3) axis-angle, radians
    root_translation: np.ndarray # (3,) meters

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if self.joint_rotations.ndim != 2 or self.joint_rotations.shape[1] != 3:
            raise InvalidParameterError("joint_rotations must be (n, 3)")
        if self.root_translation.shape != (3,):
            raise InvalidParameterError("root_translation must be (3,)")
        if not (np.all(np.isfinite(self.joint_rotations)) and np.all(np.isfinite(self.root_translation))):
            raise InvalidParameterError("non-finite pose parameter")
        mags = np.linalg.norm(self.joint_rotations, axis=1)
        if np.any(mags >= 2.0 * np.pi):
            warnings.warn("axis-angle magnitude >= 2*pi; consider re-wrapping", stacklevel=2)

    @property
    def joint_count(self) -> int:
        return self.joint_rotations.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.joint_rotations.ravel(), self.root_translation])

    @staticmethod
    def from_vector(vec: np.ndarray) -> "PoseParams":
        vec = np.asarray(vec, dtype=np.float64)
        return PoseParams(vec[:-3].reshape(-1, 3), vec[-3:])


@dataclass
class ShapeParams:
    beta: np.ndarray  # (10,) dimensionless, fixed during optimization

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.beta.shape != (10,):
            raise InvalidParameterError("beta must be a 10-vector")
        if not np.all(np.isfinite(self.beta)):
            raise InvalidParameterError("non-finite beta")

    @staticmethod
    def neutral() -> "ShapeParams":
        return ShapeParams(np.zeros(10))


@dataclass
class SkinnedTemplate:
    vertices: np.ndarray  # (m, 3) canonical-pose positions
    weights: np.ndarray   # (m, n) per-vertex bone weights

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3 or self.vertices.shape[0] < 1:
            raise InvalidParameterError("vertices must be (m, 3), m >= 1")
        if self.weights.shape[0] != self.vertices.shape[0]:
            raise InvalidParameterError("one weight row per vertex required")
        if np.any(self.weights < 0.0):
            raise InvalidParameterError("negative skinning weight")
        if np.max(np.abs(self.weights.sum(axis=1) - 1.0)) > WEIGHT_SUM_TOL:
            raise InvalidParameterError("skinning weight rows must sum to 1")

    @property
    def bone_count(self) -> int:
        return self.weights.shape[1]


@dataclass
class SkinWeightGrid:
    """Axis-aligned lattice of bone-weight vectors, sampled trilinearly.

    `resolution` counts lattice nodes per axis; node (i,j,k) sits at
    bbox_min + (i,j,k) * spacing. Unfilled nodes store zero vectors and are
    resolved through the nearest filled node when sampled.
    """

    bbox_min: np.ndarray   # (3,)
    bbox_max: np.ndarray   # (3,)
    resolution: tuple      # (nx, ny, nz) node counts
    weights: np.ndarray    # (nx, ny, nz, n_bones)
    occupied: np.ndarray   # (nx, ny, nz) bool
    _fallback_tree: cKDTree = field(default=None, repr=False)
    _occupied_flat: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        if np.any(self.bbox_max <= self.bbox_min):
            raise InvalidParameterError("bbox_max must exceed bbox_min componentwise")
        if any(r < 2 for r in self.resolution):
            raise InvalidParameterError("grid resolution must be >= 2 per axis")
        if np.any(self.weights < 0.0):
            raise InvalidParameterError("negative grid weight")

    @property
    def bone_count(self) -> int:
        return self.weights.shape[3]

    @property
    def spacing(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / (np.array(self.resolution) - 1.0)

    def node_position(self, idx: np.ndarray) -> np.ndarray:
        return self.bbox_min + np.asarray(idx, dtype=np.float64) * self.spacing

    def _ensure_fallback(self) -> None:
        if self._fallback_tree is None:
            occ = np.argwhere(self.occupied)
            if occ.shape[0] == 0:
                raise InvalidParameterError("weight grid has no occupied nodes")
            self._fallback_tree = cKDTree(self.node_position(occ))
            self._occupied_flat = occ


# ---------------------------------------------------------------------------
# operations

def _shaped_rest_locals(skeleton: Skeleton, shape: ShapeParams) -> np.ndarray:
    locals_ = skeleton.rest_local_transforms.copy()
    n = skeleton.joint_count
    factors = 1.0 + shape.beta[np.arange(n) % 10]
    for i in range(1, n):  # root offset carries world placement, not bone length
        locals_[i, :3, 3] *= factors[i]
    return locals_


def forward_kinematics(
    skeleton: Skeleton, pose: PoseParams, shape: ShapeParams
) -> tuple[np.ndarray, np.ndarray]:
    """Global joint transforms at the given pose and at rest, each (n, 4, 4).

    The global root translation is not applied here; bone_transforms adds it.
    """
    if pose.joint_count != skeleton.joint_count:
        raise InvalidParameterError(
            f"pose has {pose.joint_count} joints, skeleton has {skeleton.joint_count}"
        )
    n = skeleton.joint_count
    locals_ = _shaped_rest_locals(skeleton, shape)
    G_rest = np.empty((n, 4, 4))
    G_posed = np.empty((n, 4, 4))
    rots = rodrigues(pose.joint_rotations)
    for i in range(n):
        L_posed = locals_[i].copy()
        L_posed[:3, :3] = locals_[i, :3, :3] @ rots[i]
        p = skeleton.parents[i]
        if p < 0:
            G_rest[i] = locals_[i]
            G_posed[i] = L_posed
        else:
            G_rest[i] = G_rest[p] @ locals_[i]
            G_posed[i] = G_posed[p] @ L_posed
    return G_posed, G_rest


def bone_transforms(skeleton: Skeleton, pose: PoseParams, shape: ShapeParams) -> np.ndarray:
    """Per-bone rigid motions B_i mapping rest-space points to posed space, (n, 4, 4)."""
    G_posed, G_rest = forward_kinematics(skeleton, pose, shape)
    n = skeleton.joint_count
    T_root = np.eye(4)
    T_root[:3, 3] = pose.root_translation
    B = np.empty((n, 4, 4))
    for i in range(n):
        B[i] = T_root @ G_posed[i] @ _rigid_inverse(G_rest[i])
    return B


def bone_transform_jacobians(
    skeleton: Skeleton, pose: PoseParams, shape: ShapeParams
) -> tuple[np.ndarray, np.ndarray]:
    """Bone transforms plus dB_k / d(theta_{j,q}) as (n, n, 3, 4, 4).

    Entry [k, j, q] is the derivative of B_k w.r.t. component q of joint j's
    axis-angle vector; zero unless j is k or one of its ancestors. Root
    translation enters B additively, so its Jacobian is constant and omitted.
    """
    if pose.joint_count != skeleton.joint_count:
        raise InvalidParameterError("pose/skeleton joint count mismatch")
    n = skeleton.joint_count
    locals_ = _shaped_rest_locals(skeleton, shape)
    rots = rodrigues(pose.joint_rotations)
    rot_jacs = [rodrigues_jacobian(pose.joint_rotations[i]) for i in range(n)]

    G_posed = np.empty((n, 4, 4))
    G_rest = np.empty((n, 4, 4))
    prefix = np.empty((n, 4, 4))  # G(parent) @ rest_local, i.e. G_i without its own rotation
    for i in range(n):
        p = skeleton.parents[i]
        parent_posed = np.eye(4) if p < 0 else G_posed[p]
        parent_rest = np.eye(4) if p < 0 else G_rest[p]
        prefix[i] = parent_posed @ locals_[i]
        L_posed = locals_[i].copy()
        L_posed[:3, :3] = locals_[i, :3, :3] @ rots[i]
        G_posed[i] = parent_posed @ L_posed
        G_rest[i] = parent_rest @ locals_[i]

    T_root = np.eye(4)
    T_root[:3, 3] = pose.root_translation
    B = np.empty((n, 4, 4))
    rest_inv = np.empty((n, 4, 4))
    posed_inv = np.empty((n, 4, 4))
    for i in range(n):
        rest_inv[i] = _rigid_inverse(G_rest[i])
        posed_inv[i] = np.linalg.inv(G_posed[i])
        B[i] = T_root @ G_posed[i] @ rest_inv[i]

    ancestors = [[] for _ in range(n)]
    for k in range(n):
        j = k
        while j >= 0:
            ancestors[k].append(j)
            j = skeleton.parents[j]

    dB = np.zeros((n, n, 3, 4, 4))
    for k in range(n):
        for j in ancestors[k]:
            suffix = posed_inv[j] @ G_posed[k]  # identity when j == k
            for q in range(3):
                dRot = np.zeros((4, 4))
                dRot[:3, :3] = rot_jacs[j][q]
                dG = prefix[j] @ dRot @ suffix
                dB[k, j, q] = T_root @ dG @ rest_inv[k]
    return B, dB


def bake_weight_grid(
    template: SkinnedTemplate,
    resolution: tuple = DEFAULT_GRID_RESOLUTION,
    dilation_steps: int = DEFAULT_DILATION_STEPS,
) -> SkinWeightGrid:
    """Diffuse template vertex weights into a lattice.

    Nodes within one cell of the template gather an inverse-distance average
    of their 8 nearest vertices' weights; `dilation_steps` rounds of
    6-neighborhood averaging then grow the field into the empty surround.
    """
    res = tuple(int(r) for r in resolution)
    if any(r < 2 for r in res):
        raise InvalidParameterError("grid resolution must be >= 2 per axis")
    verts = template.vertices
    lo = verts.min(axis=0)
    hi = verts.max(axis=0)
    extent = np.maximum(hi - lo, 1e-3)
    bbox_min = lo - BBOX_PADDING * extent
    bbox_max = hi + BBOX_PADDING * extent

    nx, ny, nz = res
    spacing = (bbox_max - bbox_min) / (np.array(res) - 1.0)
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    nodes = bbox_min + np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) * spacing

    tree = cKDTree(verts)
    k_nn = min(NN_SPLAT_K, verts.shape[0])
    dists, idx = tree.query(nodes, k=k_nn)
    if k_nn == 1:
        dists, idx = dists[:, None], idx[:, None]

    seed_radius = float(spacing.max())
    seeded = dists[:, 0] <= seed_radius
    n_bones = template.bone_count
    weights = np.zeros((nodes.shape[0], n_bones))
    if np.any(seeded):
        inv = 1.0 / (dists[seeded] + NN_SPLAT_EPS)             # (S, k)
        gathered = template.weights[idx[seeded]]               # (S, k, n_bones)
        weights[seeded] = np.einsum("sk,skb->sb", inv, gathered) / inv.sum(axis=1, keepdims=True)

    weights = weights.reshape(nx, ny, nz, n_bones)
    occupied = seeded.reshape(nx, ny, nz)
    for _ in range(int(dilation_steps)):
        acc = np.zeros_like(weights)
        cnt = np.zeros((nx, ny, nz))
        for axis in range(3):
            for shift in (-1, 1):
                occ_s = np.roll(occupied, shift, axis=axis)
                w_s = np.roll(weights, shift, axis=axis)
                edge = [slice(None)] * 3
                edge[axis] = 0 if shift == 1 else -1
                occ_s[tuple(edge)] = False
                acc += np.where(occ_s[..., None], w_s, 0.0)
                cnt += occ_s
        grow = (~occupied) & (cnt > 0)
        weights[grow] = acc[grow] / cnt[grow][..., None]
        occupied = occupied | grow

    # make the field total: any node the dilation did not reach copies its
    # nearest filled node, so trilinear samples are well defined everywhere
    if not occupied.all():
        filled = np.argwhere(occupied)
        empty = np.argwhere(~occupied)
        tree_nodes = cKDTree(filled * spacing)
        _, nn = tree_nodes.query(empty * spacing)
        src = filled[nn]
        weights[empty[:, 0], empty[:, 1], empty[:, 2]] = weights[src[:, 0], src[:, 1], src[:, 2]]
        occupied = np.ones_like(occupied)

    return SkinWeightGrid(bbox_min, bbox_max, res, weights, occupied)


def sample_weights(grid: SkinWeightGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear bone weights at one point (3,) or a batch (N, 3), sum-1 rows.

    Points outside the bbox clamp to its surface; samples whose eight nodes
    are all unfilled fall back to the nearest filled node.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.clip(pts.reshape(-1, 3), grid.bbox_min, grid.bbox_max)

    res = np.array(grid.resolution)
    u = (pts - grid.bbox_min) / grid.spacing
    i0 = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    f = u - i0

    out = np.zeros((pts.shape[0], grid.bone_count))
    for corner in range(8):
        d = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = i0 + d
        w = np.prod(np.where(d == 1, f, 1.0 - f), axis=1)
        out += w[:, None] * grid.weights[idx[:, 0], idx[:, 1], idx[:, 2]]

    sums = out.sum(axis=1)
    bad = sums <= 1e-12
    if np.any(bad):
        grid._ensure_fallback()
        _, nn = grid._fallback_tree.query(pts[bad])
        occ = grid._occupied_flat[np.atleast_1d(nn)]
        w_near = grid.weights[occ[:, 0], occ[:, 1], occ[:, 2]]
        out[bad] = w_near
        sums = out.sum(axis=1)
    out /= sums[:, None]
    return out[0] if single else out


def lbs_transform(weights: np.ndarray, bones: np.ndarray) -> np.ndarray:
    """Blend bone transforms elementwise: D = sum_i w_i B_i.

    weights: (n,) or (N, n) rows summing to 1; bones: (n, 4, 4).
    """
    w = np.asarray(weights, dtype=np.float64)
    single = w.ndim == 1
    wb = w.reshape(-1, bones.shape[0])
    sums = wb.sum(axis=1)
    if np.max(np.abs(sums - 1.0)) > WEIGHT_SUM_TOL:
        raise InvalidParameterError("LBS weights must sum to 1")
    wb = wb / sums[:, None]  # exact partition of unity for the blend
    D = np.einsum("nk,kij->nij", wb, bones)
    return D[0] if single else D
