"""Canonical Gaussian model: raw parameter storage, activations, covariance, color.

Raw parameters are what the optimizer touches; activations map them to the
geometric quantities the renderer consumes:

    rotation quaternion (w,x,y,z)  -> normalized
    log_scale                      -> exp -> per-axis standard deviation (m)
    opacity logit                  -> sigmoid -> opacity in (0,1)

Spherical-harmonics color uses the common splatting convention: basis dot
coefficients, plus 0.5, clamped at zero. Degrees 0 and 1 are supported.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import quat
from .errors import (
    DegenerateInitializationError,
    InvalidParameterError,
    UnsupportedDegreeError,
)

CANONICAL = "canonical"
OBSERVATION = "observation"

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

DEFAULT_SH_DEGREE = 1
INIT_OPACITY = 0.1
_MIN_NN_DIST = 1e-7  # floor for the 3-NN scale heuristic (coincident points)


def sh_band_count(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class GaussianSet:
    """Arrays of raw per-Gaussian parameters, all of length N.

    sh_coeffs has shape (N, (d+1)^2, 3): one coefficient row per SH basis
    function, one column per color channel.
    """

    positions: np.ndarray      # (N, 3) means, meters
    rotations: np.ndarray      # (N, 4) raw quaternions (w,x,y,z)
    log_scales: np.ndarray     # (N, 3) log-meters
    opacity_logits: np.ndarray # (N,)
    sh_coeffs: np.ndarray      # (N, K, 3)
    space: str = CANONICAL

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64)
        self.sh_coeffs = np.ascontiguousarray(self.sh_coeffs, dtype=np.float64)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[1]))) - 1

    def validate(self) -> None:
        n = len(self)
        if n < 1:
            raise InvalidParameterError("GaussianSet needs at least one gaussian")
        if self.positions.shape != (n, 3):
            raise InvalidParameterError("positions must be (N, 3)")
        if self.rotations.shape != (n, 4):
            raise InvalidParameterError("rotations must be (N, 4)")
        if self.log_scales.shape != (n, 3):
            raise InvalidParameterError("log_scales must be (N, 3)")
        if self.opacity_logits.shape != (n,):
            raise InvalidParameterError("opacity_logits must be (N,)")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[0] != n or self.sh_coeffs.shape[2] != 3:
            raise InvalidParameterError("sh_coeffs must be (N, K, 3)")
        if sh_band_count(self.sh_degree) != self.sh_coeffs.shape[1]:
            raise InvalidParameterError("sh_coeffs band count is not (d+1)^2")
        if self.space not in (CANONICAL, OBSERVATION):
            raise InvalidParameterError(f"unknown space tag {self.space!r}")
        for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidParameterError(f"non-finite values in {name}")

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.positions.copy(), self.rotations.copy(), self.log_scales.copy(),
            self.opacity_logits.copy(), self.sh_coeffs.copy(), self.space,
        )

    def with_space(self, space: str) -> "GaussianSet":
        return replace(self, space=space)


@dataclass
class ActivatedGaussians:
    """Activated view of a GaussianSet (see module docstring)."""

    positions: np.ndarray   # (N, 3)
    rotations: np.ndarray   # (N, 4) unit quaternions
    scales: np.ndarray      # (N, 3) positive
    opacities: np.ndarray   # (N,) in (0, 1)
    sh_coeffs: np.ndarray   # (N, K, 3)
    rotmats: np.ndarray = field(default=None, repr=False)  # (N, 3, 3), lazy

    def rotation_matrices(self) -> np.ndarray:
        if self.rotmats is None:
            self.rotmats = quat.to_rotmat(self.rotations)
        return self.rotmats


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def activate(gset: GaussianSet) -> ActivatedGaussians:
    """Map raw parameters to unit quaternions, positive scales, (0,1) opacities."""
    gset.validate()
    with np.errstate(over="ignore"):  # inf scales are caught as degenerate later
        scales = np.exp(gset.log_scales)
    return ActivatedGaussians(
        positions=gset.positions,
        rotations=quat.normalize(gset.rotations),
        scales=scales,
        opacities=sigmoid(gset.opacity_logits),
        sh_coeffs=gset.sh_coeffs,
    )


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of q/|q|; raises on zero-norm q."""
    return quat.to_rotmat(np.asarray(q, dtype=np.float64))


def build_covariance(q: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World-space covariance R * diag(exp(2*log_scale)) * R^T (batched)."""
    R = quat_to_rotmat(q)
    var = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return np.einsum("...ij,...j,...kj->...ik", R, var, R)


def build_covariance_backward(
    q: np.ndarray, log_scale: np.ndarray, grad_sigma: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of <grad_sigma, build_covariance(q, log_scale)> (batched)."""
    R = quat_to_rotmat(q)
    var = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    G = 0.5 * (np.asarray(grad_sigma, dtype=np.float64)
               + np.swapaxes(np.asarray(grad_sigma, dtype=np.float64), -1, -2))
    grad_R = 2.0 * np.einsum("...ij,...jk,...k->...ik", G, R, var)
    grad_q = quat.rotmat_backward(q, grad_R)
    RtGR = np.einsum("...ji,...jk,...kl->...il", R, G, R)
    grad_log_scale = 2.0 * var * np.einsum("...ii->...i", RtGR)
    return grad_q, grad_log_scale


def evaluate_color(sh_coeffs: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """View-dependent RGB from SH coefficients, clamped at zero.

    sh_coeffs: (..., K, 3) with K >= (degree+1)^2; view_dir: (..., 3) unit.
    """
    if degree not in (0, 1):
        raise UnsupportedDegreeError(f"SH degree {degree} unsupported (expected 0 or 1)")
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    if sh_coeffs.shape[-2] < sh_band_count(degree):
        raise InvalidParameterError("sh_coeffs has too few bands for requested degree")
    rgb = SH_C0 * sh_coeffs[..., 0, :]
    if degree >= 1:
        d = np.asarray(view_dir, dtype=np.float64)
        x, y, z = d[..., 0:1], d[..., 1:2], d[..., 2:3]
        rgb = rgb - SH_C1 * y * sh_coeffs[..., 1, :] \
                  + SH_C1 * z * sh_coeffs[..., 2, :] \
                  - SH_C1 * x * sh_coeffs[..., 3, :]
    return np.maximum(rgb + 0.5, 0.0)


def evaluate_color_backward(
    sh_coeffs: np.ndarray,
    view_dir: np.ndarray,
    degree: int,
    grad_rgb: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of evaluate_color w.r.t. sh_coeffs and view_dir.

    Channels clamped at zero get no gradient. Shapes follow the forward call.
    """
    rgb_raw = SH_C0 * np.asarray(sh_coeffs, dtype=np.float64)[..., 0, :]
    d = np.asarray(view_dir, dtype=np.float64)
    if degree >= 1:
        x, y, z = d[..., 0:1], d[..., 1:2], d[..., 2:3]
        rgb_raw = rgb_raw - SH_C1 * y * sh_coeffs[..., 1, :] \
                          + SH_C1 * z * sh_coeffs[..., 2, :] \
                          - SH_C1 * x * sh_coeffs[..., 3, :]
    active = (rgb_raw + 0.5) > 0.0
    g = np.where(active, grad_rgb, 0.0)

    grad_sh = np.zeros_like(sh_coeffs, dtype=np.float64)
    grad_sh[..., 0, :] = SH_C0 * g
    grad_dir = np.zeros_like(d)
    if degree >= 1:
        x, y, z = d[..., 0:1], d[..., 1:2], d[..., 2:3]
        grad_sh[..., 1, :] = -SH_C1 * y * g
        grad_sh[..., 2, :] = SH_C1 * z * g
        grad_sh[..., 3, :] = -SH_C1 * x * g
        grad_dir[..., 0] = np.sum(-SH_C1 * sh_coeffs[..., 3, :] * g, axis=-1)
        grad_dir[..., 1] = np.sum(-SH_C1 * sh_coeffs[..., 1, :] * g, axis=-1)
        grad_dir[..., 2] = np.sum(SH_C1 * sh_coeffs[..., 2, :] * g, axis=-1)
    return grad_sh, grad_dir


def rgb_to_dc(color: np.ndarray) -> np.ndarray:
    """DC coefficient that reproduces `color` under evaluate_color."""
    return (np.asarray(color, dtype=np.float64) - 0.5) / SH_C0


def dc_to_rgb(dc: np.ndarray) -> np.ndarray:
    return np.clip(SH_C0 * np.asarray(dc, dtype=np.float64) + 0.5, 0.0, 1.0)


def init_from_vertices(
    template_vertices: np.ndarray,
    base_color: np.ndarray,
    sh_degree: int = DEFAULT_SH_DEGREE,
) -> GaussianSet:
    """Seed one canonical Gaussian per template vertex.

    Identity rotations; isotropic log-scale from each vertex's mean distance
    to its 3 nearest neighbors; opacity 0.1; DC color = base_color.
    """
    verts = np.asarray(template_vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise InvalidParameterError("template_vertices must be (N, 3)")
    n = verts.shape[0]
    if n < 4:
        raise InvalidParameterError("need at least 4 template vertices")
    if not np.all(np.isfinite(verts)):
        raise InvalidParameterError("non-finite template vertex")
    if np.allclose(verts, verts[0], atol=0.0, rtol=0.0):
        raise DegenerateInitializationError("all template vertices coincide")

    tree = cKDTree(verts)
    dists, _ = tree.query(verts, k=4)  # self + 3 nearest
    mean_nn = np.maximum(dists[:, 1:].mean(axis=1), _MIN_NN_DIST)

    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    log_scales = np.repeat(np.log(mean_nn)[:, None], 3, axis=1)
    opacity_logits = np.full(n, logit(INIT_OPACITY))
    sh = np.zeros((n, sh_band_count(sh_degree), 3))
    sh[:, 0, :] = rgb_to_dc(base_color)
    return GaussianSet(verts.copy(), rotations, log_scales, opacity_logits, sh, CANONICAL)
