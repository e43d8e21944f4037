"""Optimization loop: objective assembly, Adam updates, densification, pose refinement.

Each step deforms the canonical set with the frame's current pose, renders it,
scores L1 + lambda_dssim * (1 - SSIM) against the target plus the weighted
priors, and hand-chains all gradients back through the rasterizer and the
deformation into the canonical parameters and, optionally, the frame's pose.

Densification splits any Gaussian whose largest activated scale exceeds
eps_scale into two half-scale copies offset along the major axis; Adam
moments for the new rows start at zero and the kNN graph is rebuilt.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import quat
from .dataset import Dataset
from .deform import deform_backward, deform_gaussians
from .errors import InvalidParameterError
from .gaussians import GaussianSet, init_from_vertices
from .metrics import ssim
from .priors import NeighborGraph, build_knn, prior_total
from .rasterizer import render, render_backward
from .skinning import PoseParams, SkinWeightGrid

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

METRICS_COLUMNS = "step,image_loss,rigid,rot,iso,total,num_gaussians,ms_per_step"


@dataclass
class TrainConfig:
    total_steps: int = 30000
    lr_position: float = 6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_pose: float = 1e-3
    lambda_rigid: float = 4e-2
    lambda_rot: float = 4e-2
    lambda_iso: float = 4e-2
    lambda_w: float = 2000.0
    k: int = 20
    eps_scale: float = 0.05
    densify_interval: int = 500
    densify_start: int = 500
    densify_end: int = 15000
    split_enabled: bool = True
    lambda_dssim: float = 0.2
    pose_refine_enabled: bool = True
    seed: int = 0
    background: tuple = (1.0, 1.0, 1.0)
    iso_absolute: bool = False
    knn_rebuild_interval: int = 100
    init_fraction: float = 1.0       # fraction of template vertices used to seed
    init_color: tuple = (0.5, 0.5, 0.5)
    lr_position_decay: float = 0.0   # per-step exponential decay rate, 0 = constant
    stale_tol: float = 1e-2

    def __post_init__(self):
        # zero learning rates are legal (frozen groups, loss-trace checks)
        for name in ("lr_position", "lr_rotation", "lr_scale", "lr_opacity", "lr_sh", "lr_pose"):
            if getattr(self, name) < 0.0:
                raise InvalidParameterError(f"{name} must be nonnegative")
        for name in ("densify_interval", "knn_rebuild_interval"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        d["init_color"] = list(self.init_color)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        cfg = TrainConfig()
        for key, value in d.items():
            if not hasattr(cfg, key):
                raise InvalidParameterError(f"unknown config key {key!r}")
            if key in ("background", "init_color"):
                value = tuple(value)
            setattr(cfg, key, value)
        cfg.__post_init__()
        return cfg


@dataclass
class LossBreakdown:
    image: float
    rigid: float
    rot: float
    iso: float
    total: float


class AdamState:
    """Per-group Adam moments; groups resize with zero-filled rows on growth."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = {}

    def update(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name]
        v = self.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * grad * grad
        mhat = m / (1.0 - ADAM_BETA1 ** t)
        vhat = v / (1.0 - ADAM_BETA2 ** t)
        param -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)

    def keep_rows(self, name: str, mask: np.ndarray, n_new: int) -> None:
        """Drop masked-out rows and append n_new zero rows (after a split)."""
        if name not in self.m:
            return
        for bank in (self.m, self.v):
            kept = bank[name][mask]
            pad = np.zeros((n_new,) + kept.shape[1:], dtype=kept.dtype)
            bank[name] = np.concatenate([kept, pad], axis=0)

    def export_arrays(self) -> dict:
        out = {}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
            out[f"t/{name}"] = np.array([self.t[name]], dtype=np.float64)
        return out

    @staticmethod
    def from_arrays(arrays: dict) -> "AdamState":
        st = AdamState()
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            if kind == "m":
                st.m[name] = arr.copy()
            elif kind == "v":
                st.v[name] = arr.copy()
            elif kind == "t":
                st.t[name] = int(arr[0])
        return st


@dataclass
class TrainerState:
    config: TrainConfig
    dataset: Dataset
    gaussians: GaussianSet          # canonical, mutated in place by steps
    grid: SkinWeightGrid
    pose_theta: np.ndarray          # (F, n_joints, 3), refined when enabled
    pose_root: np.ndarray           # (F, 3)
    optimizer: AdamState = field(default_factory=AdamState)
    graph: NeighborGraph = None
    step: int = 0
    images: list = None             # cached target images

    def frame_pose(self, i: int) -> PoseParams:
        return PoseParams(self.pose_theta[i], self.pose_root[i])

    def rebuild_graph(self) -> None:
        self.graph = build_knn(self.gaussians.positions, self.config.k,
                               self.config.lambda_w, self.config.stale_tol)


def image_loss(rendered: np.ndarray, target: np.ndarray, lambda_dssim: float):
    """(1-l)*L1 + l*(1 - SSIM) and its gradient w.r.t. the rendered image."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise InvalidParameterError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    if lambda_dssim == 0.0:
        return l1, grad
    s, s_grad = ssim(rendered, target, return_grad=True)
    value = (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - s)
    grad = (1.0 - lambda_dssim) * grad - lambda_dssim * s_grad
    return value, grad


def split_with_scale(gset: GaussianSet, eps_scale: float, optimizer: AdamState) -> tuple[GaussianSet, int]:
    """Replace oversized Gaussians by two half-scale children along the major axis.

    Returns the (possibly new) set and the number of parents split. Children
    carry the parent's raw fields with log-scales reduced by ln 2 and positions
    offset by +-1/4 of the major-axis vector; their Adam moments start at zero.
    """
    if eps_scale <= 0.0:
        raise InvalidParameterError("eps_scale must be positive")
    scales = np.exp(gset.log_scales)
    oversized = scales.max(axis=1) > eps_scale
    n_split = int(np.count_nonzero(oversized))
    if n_split == 0:
        return gset, 0

    keep = ~oversized
    parents = np.nonzero(oversized)[0]
    R = quat.to_rotmat(gset.rotations[parents])
    axis_idx = np.argmax(scales[parents], axis=1)
    major = R[np.arange(n_split), :, axis_idx] * scales[parents, axis_idx][:, None]
    offsets = 0.25 * major

    def children(arr, delta=None):
        kept = arr[keep]
        a = arr[parents].copy()
        b = arr[parents].copy()
        if delta is not None:
            a += delta
            b -= delta
        stacked = np.empty((2 * n_split,) + arr.shape[1:], dtype=arr.dtype)
        stacked[0::2] = a
        stacked[1::2] = b
        return np.concatenate([kept, stacked], axis=0)

    child_log_scales = gset.log_scales[parents] - np.log(2.0)
    new = GaussianSet(
        positions=children(gset.positions, offsets),
        rotations=children(gset.rotations),
        log_scales=np.concatenate([gset.log_scales[keep],
                                   np.repeat(child_log_scales, 2, axis=0)], axis=0),
        opacity_logits=children(gset.opacity_logits),
        sh_coeffs=children(gset.sh_coeffs),
        space=gset.space,
    )
    for group in ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs"):
        optimizer.keep_rows(group, keep, 2 * n_split)
    return new, n_split


def pose_refine_update(state: TrainerState, frame_index: int,
                       grad_theta: np.ndarray, grad_root: np.ndarray) -> None:
    """Adam step on one frame's pose parameters."""
    if not (0 <= frame_index < state.pose_theta.shape[0]):
        raise InvalidParameterError(f"frame index {frame_index} out of range")
    if not state.config.pose_refine_enabled:
        return
    state.optimizer.update(f"pose/{frame_index}/theta", state.pose_theta[frame_index],
                           grad_theta, state.config.lr_pose)
    state.optimizer.update(f"pose/{frame_index}/root", state.pose_root[frame_index],
                           grad_root, state.config.lr_pose)


def _position_lr(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_position_decay > 0.0:
        return cfg.lr_position * np.exp(-cfg.lr_position_decay * step)
    return cfg.lr_position


def train_step(state: TrainerState, frame_index: int) -> LossBreakdown:
    """One full optimization pass on a single frame."""
    cfg = state.config
    ds = state.dataset
    frame = ds.frames[frame_index]
    pose = state.frame_pose(frame_index)

    observed, record = deform_gaussians(state.gaussians, pose, ds.beta,
                                        ds.assets.skeleton, state.grid)
    camera = ds.camera(frame_index)
    background = np.asarray(cfg.background, dtype=np.float64)
    rendered = render(observed, camera, background)
    target = state.images[frame_index] if state.images else frame.image()
    l_img, grad_img = image_loss(rendered.rgb, target, cfg.lambda_dssim)

    prior_sum, terms, pgrads = prior_total(
        state.graph, state.gaussians, observed, record,
        cfg.lambda_rigid, cfg.lambda_rot, cfg.lambda_iso, cfg.iso_absolute,
    )

    rg = render_backward(observed, camera, background, grad_img)
    dgrads = deform_backward(record,
                             rg.positions + pgrads.observation_positions,
                             rg.rotations + pgrads.observation_rotations)

    opt = state.optimizer
    opt.update("positions", state.gaussians.positions,
               dgrads.positions + pgrads.canonical_positions, _position_lr(cfg, state.step))
    opt.update("rotations", state.gaussians.rotations,
               dgrads.rotations + pgrads.canonical_rotations, cfg.lr_rotation)
    opt.update("log_scales", state.gaussians.log_scales, rg.log_scales, cfg.lr_scale)
    opt.update("opacity_logits", state.gaussians.opacity_logits, rg.opacity_logits, cfg.lr_opacity)
    opt.update("sh_coeffs", state.gaussians.sh_coeffs, rg.sh_coeffs, cfg.lr_sh)

    if cfg.pose_refine_enabled:
        pose_refine_update(state, frame_index, dgrads.joint_rotations, dgrads.root_translation)

    return LossBreakdown(
        image=l_img,
        rigid=terms["rigid"],
        rot=terms["rot"],
        iso=terms["iso"],
        total=l_img + prior_sum,
    )


@dataclass
class TrainResult:
    gaussians: GaussianSet
    pose_theta: np.ndarray
    pose_root: np.ndarray
    metrics_rows: list
    optimizer: AdamState
    steps: int
    split_events: list = field(default_factory=list)  # (step, n_before, n_after,
                                                      #  max_scale_before, max_scale_after)


def init_gaussians(dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> GaussianSet:
    verts = dataset.assets.template.vertices
    if cfg.init_fraction < 1.0:
        n = max(4, int(round(cfg.init_fraction * verts.shape[0])))
        idx = np.sort(rng.choice(verts.shape[0], size=n, replace=False))
        verts = verts[idx]
    return init_from_vertices(verts, np.asarray(cfg.init_color))


def train(cfg: TrainConfig, dataset: Dataset, initial: GaussianSet = None,
          metrics_path: str = None, log_every: int = 0) -> TrainResult:
    """Run the full loop; deterministic for a fixed seed and thread count."""
    rng = np.random.default_rng(cfg.seed)
    gaussians = initial.copy() if initial is not None else init_gaussians(dataset, cfg, rng)

    state = TrainerState(
        config=cfg,
        dataset=dataset,
        gaussians=gaussians,
        grid=dataset.assets.bake_grid(),
        pose_theta=np.array([f.pose.joint_rotations for f in dataset.frames]),
        pose_root=np.array([f.pose.root_translation for f in dataset.frames]),
        images=[f.image() for f in dataset.frames],
    )
    state.rebuild_graph()

    n_frames = len(dataset)
    order = rng.permutation(n_frames)
    cursor = 0
    rows = []
    split_events = []
    for step in range(cfg.total_steps):
        state.step = step
        if cursor == len(order):
            order = rng.permutation(n_frames)
            cursor = 0
        frame_index = int(order[cursor])
        cursor += 1

        t0 = time.perf_counter()
        needs_rebuild = False
        if (cfg.split_enabled and cfg.densify_interval > 0
                and cfg.densify_start <= step <= cfg.densify_end
                and step > 0 and step % cfg.densify_interval == 0):
            n_before = len(state.gaussians)
            max_before = float(np.exp(state.gaussians.log_scales).max())
            state.gaussians, n_split = split_with_scale(
                state.gaussians, cfg.eps_scale, state.optimizer)
            if n_split:
                split_events.append((step, n_before, len(state.gaussians), max_before,
                                     float(np.exp(state.gaussians.log_scales).max())))
                needs_rebuild = True
        if needs_rebuild or step % cfg.knn_rebuild_interval == 0:
            state.rebuild_graph()

        losses = train_step(state, frame_index)
        ms = (time.perf_counter() - t0) * 1e3
        rows.append((step, losses.image, losses.rigid, losses.rot, losses.iso,
                     losses.total, len(state.gaussians), ms))
        if log_every and step % log_every == 0:
            print(f"step {step} image {losses.image:.5f} total {losses.total:.5f} "
                  f"n {len(state.gaussians)}")

    if metrics_path:
        write_metrics_csv(metrics_path, rows)
    return TrainResult(state.gaussians, state.pose_theta, state.pose_root,
                       rows, state.optimizer, cfg.total_steps, split_events)


def write_metrics_csv(path: str, rows: list) -> None:
    with open(path, "w") as fh:
        fh.write(METRICS_COLUMNS + "\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]:.9g},{r[2]:.9g},{r[3]:.9g},{r[4]:.9g},"
                     f"{r[5]:.9g},{r[6]},{r[7]:.6g}\n")
