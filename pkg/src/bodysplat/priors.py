"""Physically-based regularization between canonical and observation space.

A kNN graph with isotropic weights w_ij = exp(-lambda_w |x_jc - x_ic|^2) is
built once in canonical space, then three losses penalize neighborhoods whose
canonical-to-observation motion is not locally rigid:

    rigid: |(x_jo - x_io) - R_io R_ic^T (x_jc - x_ic)|
    rot:   |rel_j - rel_i| over hemisphere-aligned rel = q_o (x) q_c^-1
    iso:   |x_jo - x_io| - |x_jc - x_ic|   (signed as printed; abs optional)

All three average over k*N edges with an unsquared L2 norm per edge and a
zero subgradient at the norm's kink. Graph indices and weights are frozen at
build time; gradients flow through the loss terms only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import quat
from .errors import InsufficientPointsError, InvalidParameterError, StaleGraphError
from .gaussians import GaussianSet

DEFAULT_K = 20
DEFAULT_LAMBDA_W = 2000.0       # m^-2, calibrated to ~1.8 m body scale
DEFAULT_STALE_TOL = 1e-2        # m of canonical drift tolerated before rebuild
_NORM_GUARD = 1e-30


@dataclass
class NeighborGraph:
    k: int
    indices: np.ndarray    # (N, k) neighbor ids, self excluded
    weights: np.ndarray    # (N, k) in (0, 1]
    snapshot: np.ndarray   # (N, 3) canonical positions at build time
    stale_tol: float = DEFAULT_STALE_TOL

    def __len__(self) -> int:
        return self.indices.shape[0]

    def check_fresh(self, canonical_positions: np.ndarray) -> None:
        pos = np.asarray(canonical_positions, dtype=np.float64)
        if pos.shape != self.snapshot.shape:
            raise StaleGraphError(
                f"graph built for {self.snapshot.shape[0]} gaussians, got {pos.shape[0]}"
            )
        drift = float(np.max(np.linalg.norm(pos - self.snapshot, axis=1)))
        if drift > self.stale_tol:
            raise StaleGraphError(f"canonical positions drifted {drift:.3e} m since build")


def build_knn(
    canonical_positions: np.ndarray,
    k: int = DEFAULT_K,
    lambda_w: float = DEFAULT_LAMBDA_W,
    stale_tol: float = DEFAULT_STALE_TOL,
) -> NeighborGraph:
    """Exact Euclidean kNN (ties broken by ascending index) with exp(-lambda_w d^2) weights."""
    pos = np.asarray(canonical_positions, dtype=np.float64)
    n = pos.shape[0]
    if n <= k:
        raise InsufficientPointsError(f"need more than k={k} points, got {n}")

    tree = cKDTree(pos)
    # over-query so boundary ties can be re-ranked by (distance, index)
    m = min(n, k + 8)
    dists, idx = tree.query(pos, k=m)
    indices = np.empty((n, k), dtype=np.int64)
    weights = np.empty((n, k))
    for i in range(n):
        cand = [(dists[i, j], idx[i, j]) for j in range(m) if idx[i, j] != i]
        cand.sort()
        chosen = cand[:k]
        for j, (d, ci) in enumerate(chosen):
            indices[i, j] = ci
            weights[i, j] = np.exp(-lambda_w * d * d)
    return NeighborGraph(k, indices, weights, pos.copy(), stale_tol)


@dataclass
class PriorGrads:
    """Gradients on the raw parameters each loss touches; zeros elsewhere."""

    canonical_positions: np.ndarray
    canonical_rotations: np.ndarray
    observation_positions: np.ndarray
    observation_rotations: np.ndarray

    @staticmethod
    def zeros(n: int) -> "PriorGrads":
        return PriorGrads(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros((n, 4)))

    def add_scaled(self, other: "PriorGrads", scale: float) -> None:
        self.canonical_positions += scale * other.canonical_positions
        self.canonical_rotations += scale * other.canonical_rotations
        self.observation_positions += scale * other.observation_positions
        self.observation_rotations += scale * other.observation_rotations


def _edge_arrays(graph: NeighborGraph, canonical: GaussianSet, observation: GaussianSet):
    graph.check_fresh(canonical.positions)
    if len(observation) != len(canonical):
        raise InvalidParameterError("canonical/observation set size mismatch")
    n, k = graph.indices.shape
    i_idx = np.repeat(np.arange(n), k)
    j_idx = graph.indices.ravel()
    w = graph.weights.ravel()
    return n, k, i_idx, j_idx, w


def rigid_loss(
    graph: NeighborGraph,
    canonical: GaussianSet,
    observation: GaussianSet,
    record=None,
) -> tuple[float, PriorGrads]:
    """Local-rigidity penalty and its gradients."""
    n, k, i_idx, j_idx, w = _edge_arrays(graph, canonical, observation)
    norm = 1.0 / (k * n)

    xc, xo = canonical.positions, observation.positions
    Rc = quat.to_rotmat(canonical.rotations)
    Ro = quat.to_rotmat(observation.rotations)
    Rrel = Ro @ np.swapaxes(Rc, 1, 2)          # R_o R_c^-1 per gaussian

    dc = xc[j_idx] - xc[i_idx]                 # (E, 3)
    do = xo[j_idx] - xo[i_idx]
    e = do - np.einsum("eij,ej->ei", Rrel[i_idx], dc)
    lens = np.linalg.norm(e, axis=1)
    loss = float(norm * np.sum(w * lens))

    # d|e|/de with a zero subgradient at e = 0
    ehat = np.where(lens[:, None] > _NORM_GUARD, e / np.maximum(lens, _NORM_GUARD)[:, None], 0.0)
    ge = (norm * w)[:, None] * ehat            # dL/de per edge

    grads = PriorGrads.zeros(n)
    np.add.at(grads.observation_positions, j_idx, ge)
    np.add.at(grads.observation_positions, i_idx, -ge)
    rot_term = np.einsum("eij,ej->ei", np.swapaxes(Rrel[i_idx], 1, 2), ge)
    np.add.at(grads.canonical_positions, j_idx, -rot_term)
    np.add.at(grads.canonical_positions, i_idx, rot_term)

    # dL/dRrel_i = -sum_j ge (x_jc - x_ic)^T
    gRrel = np.zeros((n, 3, 3))
    np.add.at(gRrel, i_idx, -np.einsum("ei,ej->eij", ge, dc))
    gRo = gRrel @ Rc                            # d<G, Ro Rc^T>/dRo = G Rc
    gRc = np.einsum("nji,njk->nik", gRrel, Ro)  # ... /dRc = G^T Ro
    grads.observation_rotations += quat.rotmat_backward(observation.rotations, gRo)
    grads.canonical_rotations += quat.rotmat_backward(canonical.rotations, gRc)
    return loss, grads


def _relative_quats(canonical: GaussianSet, observation: GaussianSet):
    qc = quat.normalize(canonical.rotations)
    qo = quat.normalize(observation.rotations)
    rel = quat.multiply(qo, quat.conjugate(qc))
    flip = np.where(rel[:, 0] < 0.0, -1.0, 1.0)
    return qc, qo, rel * flip[:, None], flip


def rot_loss(
    graph: NeighborGraph,
    canonical: GaussianSet,
    observation: GaussianSet,
) -> tuple[float, PriorGrads]:
    """Local-rotation penalty over hemisphere-aligned relative quaternions."""
    n, k, i_idx, j_idx, w = _edge_arrays(graph, canonical, observation)
    norm = 1.0 / (k * n)

    qc, qo, rel, flip = _relative_quats(canonical, observation)
    d = rel[j_idx] - rel[i_idx]                 # (E, 4)
    lens = np.linalg.norm(d, axis=1)
    loss = float(norm * np.sum(w * lens))

    dhat = np.where(lens[:, None] > _NORM_GUARD, d / np.maximum(lens, _NORM_GUARD)[:, None], 0.0)
    gd = (norm * w)[:, None] * dhat

    grel = np.zeros((n, 4))
    np.add.at(grel, j_idx, gd)
    np.add.at(grel, i_idx, -gd)
    grel *= flip[:, None]

    # rel = L(qo) conj(qc) = R(conj(qc)) qo
    g_qo_unit = np.einsum("nij,ni->nj", quat.right_matrix(quat.conjugate(qc)), grel)
    g_qc_conj = np.einsum("nij,ni->nj", quat.left_matrix(qo), grel)
    g_qc_unit = g_qc_conj.copy()
    g_qc_unit[:, 1:] *= -1.0

    grads = PriorGrads.zeros(n)
    grads.observation_rotations += _unit_quat_backward(observation.rotations, g_qo_unit)
    grads.canonical_rotations += _unit_quat_backward(canonical.rotations, g_qc_unit)
    return loss, grads


def _unit_quat_backward(q_raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    nrm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    u = q_raw / nrm
    return (grad_unit - u * np.sum(grad_unit * u, axis=-1, keepdims=True)) / nrm


def iso_loss(
    graph: NeighborGraph,
    canonical: GaussianSet,
    observation: GaussianSet,
    absolute: bool = False,
) -> tuple[float, PriorGrads]:
    """Local-isometry penalty: change of neighbor distances between spaces.

    Signed by default, exactly as the objective is printed; `absolute` wraps
    each edge term in |.|.
    """
    n, k, i_idx, j_idx, w = _edge_arrays(graph, canonical, observation)
    norm = 1.0 / (k * n)

    dc = canonical.positions[j_idx] - canonical.positions[i_idx]
    do = observation.positions[j_idx] - observation.positions[i_idx]
    lc = np.linalg.norm(dc, axis=1)
    lo = np.linalg.norm(do, axis=1)
    diff = lo - lc
    if absolute:
        loss = float(norm * np.sum(w * np.abs(diff)))
        sign = np.sign(diff)
    else:
        loss = float(norm * np.sum(w * diff))
        sign = np.ones_like(diff)

    coef = norm * w * sign
    dohat = np.where(lo[:, None] > _NORM_GUARD, do / np.maximum(lo, _NORM_GUARD)[:, None], 0.0)
    dchat = np.where(lc[:, None] > _NORM_GUARD, dc / np.maximum(lc, _NORM_GUARD)[:, None], 0.0)

    grads = PriorGrads.zeros(n)
    np.add.at(grads.observation_positions, j_idx, coef[:, None] * dohat)
    np.add.at(grads.observation_positions, i_idx, -coef[:, None] * dohat)
    np.add.at(grads.canonical_positions, j_idx, -coef[:, None] * dchat)
    np.add.at(grads.canonical_positions, i_idx, coef[:, None] * dchat)
    return loss, grads


def prior_total(
    graph: NeighborGraph,
    canonical: GaussianSet,
    observation: GaussianSet,
    record=None,
    lambda_rigid: float = 0.04,
    lambda_rot: float = 0.04,
    lambda_iso: float = 0.04,
    iso_absolute: bool = False,
) -> tuple[float, dict, PriorGrads]:
    """Weighted sum of the three priors; returns (total, per-term dict, grads)."""
    n = len(canonical)
    grads = PriorGrads.zeros(n)
    terms = {"rigid": 0.0, "rot": 0.0, "iso": 0.0}
    if lambda_rigid != 0.0:
        terms["rigid"], g = rigid_loss(graph, canonical, observation, record)
        grads.add_scaled(g, lambda_rigid)
    if lambda_rot != 0.0:
        terms["rot"], g = rot_loss(graph, canonical, observation)
        grads.add_scaled(g, lambda_rot)
    if lambda_iso != 0.0:
        terms["iso"], g = iso_loss(graph, canonical, observation, iso_absolute)
        grads.add_scaled(g, lambda_iso)
    total = lambda_rigid * terms["rigid"] + lambda_rot * terms["rot"] + lambda_iso * terms["iso"]
    return float(total), terms, grads
