"""Differentiable perspective splatting on the CPU.

Projection follows the EWA approximation: camera-space mean t = (W x)_xyz,
pixel mean (fx tx/tz + cx, fy ty/tz + cy), and screen covariance
J W_R Sigma W_R^T J^T with the perspective Jacobian J, plus a 0.3 px^2
low-pass diagonal. Compositing is front-to-back alpha blending with
transmittance, per 16x16 pixel tile, splats depth-sorted with index
tie-breaking. The backward pass is a hand-written adjoint of the whole chain
down to the raw Gaussian parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quat
from ._kernels import ALPHA_SKIP, composite_backward, composite_forward
from .errors import InvalidParameterError
from .gaussians import (
    OBSERVATION,
    ActivatedGaussians,
    GaussianSet,
    activate,
    evaluate_color,
    evaluate_color_backward,
)

TILE_SIZE = 16
LOW_PASS = 0.3          # px^2 added to the screen covariance diagonal
DEGENERATE_DET = 1e-12
# binning radius in sigmas: covers every pixel that can pass the 1/255
# opacity skip even for near-opaque splats (sqrt(2 ln(255*0.99)) ~ 3.33)
BIN_SIGMA = 3.33


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # (4, 4) rigid
    z_near: float = 0.01

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise InvalidParameterError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be positive")
        W = self.world_to_camera
        if W.shape != (4, 4):
            raise InvalidParameterError("world_to_camera must be 4x4")
        R = W[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidParameterError("world_to_camera must be rigid")
        if np.max(np.abs(W[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 0.0:
            raise InvalidParameterError("world_to_camera must have (0,0,0,1) bottom row")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray      # (2,) pixels
    cov2d: np.ndarray       # (2, 2) px^2, low-pass included
    depth: float            # camera-space z, meters
    rgb: np.ndarray         # (3,) view-dependent color
    alpha: float            # activated opacity
    source_index: int


@dataclass
class RenderStats:
    n_gaussians: int = 0
    n_culled: int = 0
    n_skipped_degenerate: int = 0


@dataclass
class RenderedImage:
    rgb: np.ndarray                      # (H, W, 3) linear values in [0, 1]
    alpha: np.ndarray = None             # (H, W) accumulated opacity
    stats: RenderStats = field(default_factory=RenderStats)


@dataclass
class RasterGrads:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray


def perspective_jacobian(t: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """J of the pixel projection at camera-space points t, shape (..., 2, 3)."""
    t = np.asarray(t, dtype=np.float64)
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    J = np.zeros(t.shape[:-1] + (2, 3))
    J[..., 0, 0] = fx / tz
    J[..., 0, 2] = -fx * tx / (tz * tz)
    J[..., 1, 1] = fy / tz
    J[..., 1, 2] = -fy * ty / (tz * tz)
    return J


@dataclass
class _Projected:
    """Batch projection scratch shared by forward and backward."""

    keep: np.ndarray        # (N,) bool, in front of near plane and non-degenerate
    t: np.ndarray           # (N, 3) camera-space means
    mean2d: np.ndarray      # (N, 2)
    depth: np.ndarray       # (N,)
    J: np.ndarray           # (N, 2, 3)
    V: np.ndarray           # (N, 2, 3) J @ W_R
    cov3d: np.ndarray       # (N, 3, 3)
    cov2d: np.ndarray       # (N, 2, 2) with low-pass
    conic: np.ndarray       # (N, 3) upper-triangle of the inverse
    color: np.ndarray       # (N, 3)
    view_dir: np.ndarray    # (N, 3)
    view_dist: np.ndarray   # (N,)
    act: ActivatedGaussians
    stats: RenderStats


def _project_batch(gset: GaussianSet, camera: Camera) -> _Projected:
    act = activate(gset)
    n = len(gset)
    stats = RenderStats(n_gaussians=n)

    t = act.positions @ camera.rotation.T + camera.translation
    depth = t[:, 2]
    keep = depth > camera.z_near
    stats.n_culled = int(np.sum(~keep))

    mean2d = np.zeros((n, 2))
    tz = np.where(keep, depth, 1.0)
    mean2d[:, 0] = camera.fx * t[:, 0] / tz + camera.cx
    mean2d[:, 1] = camera.fy * t[:, 1] / tz + camera.cy

    J = perspective_jacobian(np.where(keep[:, None], t, np.array([0.0, 0.0, 1.0])),
                             camera.fx, camera.fy)
    V = J @ camera.rotation

    R = act.rotation_matrices()
    var = act.scales ** 2
    cov3d = np.einsum("nij,nj,nkj->nik", R, var, R)
    cov2d = np.einsum("nij,njk,nlk->nil", V, cov3d, V)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    degenerate = keep & ((det <= DEGENERATE_DET) | ~np.isfinite(det))
    stats.n_skipped_degenerate = int(np.sum(degenerate))
    keep = keep & ~degenerate

    conic = np.zeros((n, 3))
    safe_det = np.where(keep, det, 1.0)
    conic[:, 0] = cov2d[:, 1, 1] / safe_det
    conic[:, 1] = -cov2d[:, 0, 1] / safe_det
    conic[:, 2] = cov2d[:, 0, 0] / safe_det

    offset = act.positions - camera.center
    dist = np.linalg.norm(offset, axis=1)
    dist = np.where(dist > 0.0, dist, 1.0)
    view_dir = offset / dist[:, None]
    color = evaluate_color(act.sh_coeffs, view_dir, gset.sh_degree)

    return _Projected(keep, t, mean2d, depth, J, V, cov3d, cov2d, conic,
                      color, view_dir, dist, act, stats)


def project(gset: GaussianSet, camera: Camera, index: int) -> ProjectedGaussian | None:
    """Project one Gaussian; None when culled by the near plane."""
    proj = _project_batch(gset, camera)
    if not proj.keep[index]:
        return None
    return ProjectedGaussian(
        mean2d=proj.mean2d[index].copy(),
        cov2d=proj.cov2d[index].copy(),
        depth=float(proj.depth[index]),
        rgb=proj.color[index].copy(),
        alpha=float(proj.act.opacities[index]),
        source_index=index,
    )


def composite(projected: list, pixel: tuple, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Reference per-pixel front-to-back blend over a depth-sorted splat list."""
    from ._kernels import ALPHA_CLAMP, T_TERMINATE

    px, py = float(pixel[0]), float(pixel[1])
    out = np.zeros(3)
    T = 1.0
    for g in projected:
        det = g.cov2d[0, 0] * g.cov2d[1, 1] - g.cov2d[0, 1] * g.cov2d[1, 0]
        if det <= DEGENERATE_DET:
            continue
        inv = np.array([[g.cov2d[1, 1], -g.cov2d[0, 1]], [-g.cov2d[1, 0], g.cov2d[0, 0]]]) / det
        d = np.array([px - g.mean2d[0], py - g.mean2d[1]])
        power = -0.5 * d @ inv @ d
        if power > 0.0:
            continue
        alpha = min(g.alpha * np.exp(power), ALPHA_CLAMP)
        if alpha < ALPHA_SKIP:
            continue
        test_T = T * (1.0 - alpha)
        if test_T < T_TERMINATE:
            break
        out += g.rgb * alpha * T
        T = test_T
    return out + T * np.asarray(background, dtype=np.float64)


def _bin_tiles(proj: _Projected, camera: Camera):
    """CSR tile lists, each sorted by (depth, source index)."""
    n = len(proj.keep)
    n_tiles_x = (camera.width + TILE_SIZE - 1) // TILE_SIZE
    n_tiles_y = (camera.height + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = n_tiles_x * n_tiles_y

    ids = np.nonzero(proj.keep)[0]
    if ids.size == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)

    c = proj.cov2d[ids]
    half_trace = 0.5 * (c[:, 0, 0] + c[:, 1, 1])
    det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
    lam_max = half_trace + np.sqrt(np.maximum(half_trace ** 2 - det, 0.0))
    radius = BIN_SIGMA * np.sqrt(lam_max)

    mx, my = proj.mean2d[ids, 0], proj.mean2d[ids, 1]
    tx0 = np.clip(np.floor((mx - radius) / TILE_SIZE), 0, n_tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((mx + radius) / TILE_SIZE), 0, n_tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((my - radius) / TILE_SIZE), 0, n_tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((my + radius) / TILE_SIZE), 0, n_tiles_y - 1).astype(np.int64)
    visible = (mx + radius >= 0) & (mx - radius < camera.width) & \
              (my + radius >= 0) & (my - radius < camera.height)

    pair_tiles = []
    pair_ids = []
    for k in range(ids.size):
        if not visible[k]:
            continue
        for ty in range(ty0[k], ty1[k] + 1):
            base = ty * n_tiles_x
            for tx in range(tx0[k], tx1[k] + 1):
                pair_tiles.append(base + tx)
                pair_ids.append(ids[k])
    if not pair_tiles:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)

    pair_tiles = np.asarray(pair_tiles, dtype=np.int64)
    pair_ids = np.asarray(pair_ids, dtype=np.int64)
    order = np.lexsort((pair_ids, proj.depth[pair_ids], pair_tiles))
    pair_tiles = pair_tiles[order]
    pair_ids = pair_ids[order]
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    counts = np.bincount(pair_tiles, minlength=n_tiles)
    offsets[1:] = np.cumsum(counts)
    return offsets, pair_ids


def render(gset: GaussianSet, camera: Camera, background) -> RenderedImage:
    """Deterministic forward splat of an observation-space set."""
    if gset.space != OBSERVATION:
        raise InvalidParameterError("render expects an observation-space set")
    if camera.width < 1 or camera.height < 1:
        raise InvalidParameterError("zero-size image")
    background = np.asarray(background, dtype=np.float64)
    if background.shape != (3,):
        raise InvalidParameterError("background must be an RGB triple")
    if len(gset) == 0:
        rgb = np.tile(background, (camera.height, camera.width, 1))
        return RenderedImage(rgb=rgb, alpha=np.zeros((camera.height, camera.width)))

    proj = _project_batch(gset, camera)
    offsets, tile_ids = _bin_tiles(proj, camera)
    rgb = np.zeros((camera.height, camera.width, 3))
    alpha = np.zeros((camera.height, camera.width))
    composite_forward(
        camera.height, camera.width, TILE_SIZE,
        offsets, tile_ids,
        proj.mean2d, proj.conic, proj.color, proj.act.opacities,
        background, rgb, alpha,
    )
    return RenderedImage(rgb=rgb, alpha=alpha, stats=proj.stats)


def render_backward(
    gset: GaussianSet, camera: Camera, background, grad_image: np.ndarray
) -> RasterGrads:
    """Adjoint of render: gradients of <grad_image, render(...)> w.r.t. raw params."""
    if gset.space != OBSERVATION:
        raise InvalidParameterError("render_backward expects an observation-space set")
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != (camera.height, camera.width, 3):
        raise InvalidParameterError("grad_image shape must match the camera image size")
    background = np.asarray(background, dtype=np.float64)
    n = len(gset)
    if n == 0:
        return RasterGrads(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                           np.zeros(0), np.zeros((0, 0, 3)))

    proj = _project_batch(gset, camera)
    offsets, tile_ids = _bin_tiles(proj, camera)
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_alpha = np.zeros(n)
    g_color = np.zeros((n, 3))
    composite_backward(
        camera.height, camera.width, TILE_SIZE,
        offsets, tile_ids,
        proj.mean2d, proj.conic, proj.color, proj.act.opacities,
        background, grad_image,
        g_mean2d, g_conic, g_alpha, g_color,
    )

    act = proj.act
    keep = proj.keep

    # conic -> cov2d (inverse-matrix adjoint), as symmetric matrices
    gq = np.zeros((n, 2, 2))
    gq[:, 0, 0] = g_conic[:, 0]
    gq[:, 0, 1] = gq[:, 1, 0] = 0.5 * g_conic[:, 1]
    gq[:, 1, 1] = g_conic[:, 2]
    Q = np.zeros((n, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1] = proj.conic[:, 0], proj.conic[:, 1]
    Q[:, 1, 0], Q[:, 1, 1] = proj.conic[:, 1], proj.conic[:, 2]
    g_cov2d = -np.einsum("nij,njk,nkl->nil", Q, gq, Q)
    g_cov2d = 0.5 * (g_cov2d + np.swapaxes(g_cov2d, 1, 2))

    # cov2d = V cov3d V^T (+ const)
    g_V = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2d, proj.V, proj.cov3d)
    g_cov3d = np.einsum("nji,njk,nkl->nil", proj.V, g_cov2d, proj.V)

    # V = J W_R
    g_J = np.einsum("nij,kj->nik", g_V, camera.rotation)

    # mean2d and J both reach the camera-space mean t
    g_t = np.einsum("nij,ni->nj", proj.J, g_mean2d)
    fx, fy = camera.fx, camera.fy
    tx, ty, tz = proj.t[:, 0], proj.t[:, 1], proj.t[:, 2]
    tz = np.where(keep, tz, 1.0)
    g_t[:, 0] += g_J[:, 0, 2] * (-fx / tz ** 2)
    g_t[:, 1] += g_J[:, 1, 2] * (-fy / tz ** 2)
    g_t[:, 2] += g_J[:, 0, 0] * (-fx / tz ** 2) \
               + g_J[:, 0, 2] * (2.0 * fx * tx / tz ** 3) \
               + g_J[:, 1, 1] * (-fy / tz ** 2) \
               + g_J[:, 1, 2] * (2.0 * fy * ty / tz ** 3)

    g_pos = g_t @ camera.rotation

    # color: SH coefficients and, at degree >= 1, the view direction
    g_sh, g_dir = evaluate_color_backward(act.sh_coeffs, proj.view_dir, gset.sh_degree, g_color)
    dot = np.sum(g_dir * proj.view_dir, axis=1, keepdims=True)
    g_pos += (g_dir - proj.view_dir * dot) / proj.view_dist[:, None]

    # cov3d = R diag(s^2) R^T
    var = act.scales ** 2
    g_cov3d_sym = 0.5 * (g_cov3d + np.swapaxes(g_cov3d, 1, 2))
    R = act.rotation_matrices()
    g_R = 2.0 * np.einsum("nij,njk,nk->nik", g_cov3d_sym, R, var)
    RtGR = np.einsum("nji,njk,nkl->nil", R, g_cov3d_sym, R)
    g_scales = 2.0 * act.scales * np.einsum("nii->ni", RtGR)
    g_log_scales = g_scales * act.scales

    g_rot = quat.rotmat_backward(gset.rotations, g_R)

    g_logits = g_alpha * act.opacities * (1.0 - act.opacities)

    zero = ~keep
    for arr in (g_pos, g_rot, g_log_scales, g_sh):
        arr[zero] = 0.0
    g_logits[zero] = 0.0

    return RasterGrads(g_pos, g_rot, g_log_scales, g_logits, g_sh)
