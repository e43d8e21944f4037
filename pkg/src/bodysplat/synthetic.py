"""Synthetic capsule-body datasets used as the end-to-end verification oracle.

The body is a kinematic chain of capsule segments stacked along +y. Template
vertices are sampled on the capsule surfaces, skinned with smooth
distance-based weights, and painted with per-segment colors plus height bands.
A ground-truth Gaussian sits on every vertex. The motion is a rotation in
place (root yaw over the sequence) with gentle per-joint sway, filmed by a
fixed camera; frames are rendered with this package's own rasterizer, so a
perfect reconstruction reproduces the images exactly.

Optional pose noise perturbs the training manifest's joint angles only; the
images and the saved ground truth keep the clean poses.
"""
from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .checkpoint import Checkpoint, save_checkpoint
from .dataset import ModelAssets, save_manifest, save_model_assets
from .deform import deform_gaussians
from .errors import InvalidParameterError
from .gaussians import CANONICAL, GaussianSet, logit, rgb_to_dc, sh_band_count
from .images import save_png
from .rasterizer import Camera, render
from .skinning import PoseParams, ShapeParams, Skeleton, SkinnedTemplate

GT_CHECKPOINT = "ground_truth.bsc"
MODEL_FILE = "model.json"


@dataclass
class SyntheticSpec:
    n_bones: int = 4
    n_vertices: int = 800
    image_size: int = 128
    n_train_frames: int = 36
    n_holdout_frames: int = 12
    pose_noise: float = 0.0        # rad stddev on training-manifest joint angles
    yaw_turns: float = 1.0         # root revolutions over the training sequence
    sway_amplitude: float = 0.18   # rad of per-joint sinusoidal sway
    sway_cycles: float = 2.0
    base_height: float = 0.55      # m, root joint height
    chain_length: float = 1.1      # m, total bone length
    camera_distance: float = 2.6   # m
    focal: float = 230.0           # px
    background: tuple = (1.0, 1.0, 1.0)
    grid_resolution: tuple = (48, 48, 48)
    grid_dilation_steps: int = 4

    def __post_init__(self):
        if not (2 <= self.n_bones <= 8):
            raise InvalidParameterError("n_bones must be in [2, 8]")
        if self.n_vertices < 16:
            raise InvalidParameterError("need at least 16 template vertices")
        if self.image_size < 16:
            raise InvalidParameterError("image_size must be at least 16")


@dataclass
class SyntheticDataset:
    root: str
    train_manifest: str
    holdout_manifest: str
    model_path: str
    gt_checkpoint: str
    gt_poses: np.ndarray        # (F_train, n_bones, 3) clean joint angles
    noisy_poses: np.ndarray     # what the training manifest carries
    spec: SyntheticSpec = None


def build_skeleton(spec: SyntheticSpec) -> Skeleton:
    n = spec.n_bones
    seg = spec.chain_length / n
    parents = np.full(n, -1, dtype=np.int64)
    parents[1:] = np.arange(n - 1)
    locals_ = np.tile(np.eye(4), (n, 1, 1))
    locals_[0, :3, 3] = (0.0, spec.base_height, 0.0)
    for i in range(1, n):
        locals_[i, :3, 3] = (0.0, seg, 0.0)
    return Skeleton(parents, locals_)


def _segment_geometry(spec: SyntheticSpec):
    """Per-bone segment start heights, lengths and capsule radii (rest pose)."""
    n = spec.n_bones
    seg = spec.chain_length / n
    starts = spec.base_height + seg * np.arange(n)
    radii = 0.16 * (1.0 - 0.35 * np.arange(n) / n)
    return starts, np.full(n, seg), radii


def build_template(spec: SyntheticSpec, rng: np.random.Generator) -> SkinnedTemplate:
    n = spec.n_bones
    starts, lengths, radii = _segment_geometry(spec)
    per_bone = np.full(n, spec.n_vertices // n)
    per_bone[: spec.n_vertices - per_bone.sum()] += 1

    verts = []
    for b in range(n):
        phi = rng.uniform(0.0, 2.0 * np.pi, per_bone[b])
        u = rng.uniform(0.0, lengths[b], per_bone[b])
        verts.append(np.column_stack([
            radii[b] * np.cos(phi),
            starts[b] + u,
            radii[b] * np.sin(phi),
        ]))
    verts = np.concatenate(verts)

    # smooth weights from distance to each bone's axis segment
    tau = 0.5 * float(radii.mean())
    d = np.empty((verts.shape[0], n))
    for b in range(n):
        y = np.clip(verts[:, 1] - starts[b], 0.0, lengths[b])
        axis_pt = np.column_stack([np.zeros_like(y), starts[b] + y, np.zeros_like(y)])
        d[:, b] = np.linalg.norm(verts - axis_pt, axis=1)
    w = np.exp(-((d / tau) ** 2))
    w /= w.sum(axis=1, keepdims=True)
    return SkinnedTemplate(verts, w)


def _segment_palette(n: int) -> np.ndarray:
    hues = (0.08 + 0.61803398875 * np.arange(n)) % 1.0
    return np.array([colorsys.hsv_to_rgb(h, 0.75, 0.8) for h in hues])


def paint_gaussians(spec: SyntheticSpec, template: SkinnedTemplate) -> GaussianSet:
    """Ground-truth canonical Gaussians on the template vertices."""
    verts = template.vertices
    n = verts.shape[0]
    palette = _segment_palette(spec.n_bones)
    dominant = np.argmax(template.weights, axis=1)
    bands = 0.5 + 0.5 * np.sin(26.0 * verts[:, 1] + 3.0 * np.arctan2(verts[:, 2], verts[:, 0]))
    color = palette[dominant] * (0.72 + 0.28 * bands[:, None])
    color = np.clip(color, 0.03, 0.97)

    tree = cKDTree(verts)
    dists, _ = tree.query(verts, k=4)
    mean_nn = np.maximum(dists[:, 1:].mean(axis=1), 1e-7)

    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    sh = np.zeros((n, sh_band_count(1), 3))
    sh[:, 0, :] = rgb_to_dc(color)
    return GaussianSet(
        positions=verts.copy(),
        rotations=rotations,
        log_scales=np.repeat(np.log(mean_nn * 0.9)[:, None], 3, axis=1),
        opacity_logits=np.full(n, logit(0.97)),
        sh_coeffs=sh,
        space=CANONICAL,
    )


def motion_pose(spec: SyntheticSpec, s: float) -> PoseParams:
    """Pose at sequence parameter s in [0, n_train_frames)."""
    n = spec.n_bones
    frac = s / spec.n_train_frames
    theta = np.zeros((n, 3))
    theta[0, 1] = 2.0 * np.pi * spec.yaw_turns * frac
    for i in range(1, n):
        phase = 2.1 * i
        swing = spec.sway_amplitude * np.sin(2.0 * np.pi * spec.sway_cycles * frac + phase)
        axis = 0 if i % 2 else 2
        theta[i, axis] = swing
    return PoseParams(theta, np.zeros(3))


def make_camera(spec: SyntheticSpec) -> tuple[dict, np.ndarray]:
    y_mid = spec.base_height + 0.5 * spec.chain_length
    R = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    center = np.array([0.0, y_mid, spec.camera_distance])
    W = np.eye(4)
    W[:3, :3] = R
    W[:3, 3] = -R @ center
    c = (spec.image_size - 1) / 2.0
    intr = {
        "fx": spec.focal, "fy": spec.focal, "cx": c, "cy": c,
        "width": spec.image_size, "height": spec.image_size, "z_near": 0.01,
    }
    return intr, W


def generate_synthetic(spec: SyntheticSpec, out_dir: str, seed: int = 0) -> SyntheticDataset:
    """Write a train/holdout dataset pair plus ground truth under out_dir."""
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)

    skeleton = build_skeleton(spec)
    template = build_template(spec, rng)
    assets = ModelAssets(skeleton, template, spec.grid_resolution, spec.grid_dilation_steps)
    model_path = os.path.join(out_dir, MODEL_FILE)
    save_model_assets(model_path, assets)

    gt = paint_gaussians(spec, template)
    grid = assets.bake_grid()
    shape = ShapeParams.neutral()
    intr, W = make_camera(spec)
    camera = Camera(fx=intr["fx"], fy=intr["fy"], cx=intr["cx"], cy=intr["cy"],
                    width=intr["width"], height=intr["height"], world_to_camera=W,
                    z_near=intr["z_near"])
    background = np.asarray(spec.background, dtype=np.float64)

    def write_split(name: str, params: list) -> tuple[str, np.ndarray]:
        split_dir = os.path.join(out_dir, name)
        os.makedirs(os.path.join(split_dir, "frames"), exist_ok=True)
        frames = []
        thetas = []
        for i, s in enumerate(params):
            pose = motion_pose(spec, s)
            observed, _ = deform_gaussians(gt, pose, shape, skeleton, grid)
            img = render(observed, camera, background)
            rel = os.path.join("frames", f"f{i:04d}.png")
            save_png(os.path.join(split_dir, rel), img.rgb)
            frames.append({
                "image": rel,
                "world_to_camera": W.tolist(),
                "theta": pose.joint_rotations.ravel().tolist(),
                "root_translation": pose.root_translation.tolist(),
            })
            thetas.append(pose.joint_rotations)
        manifest = os.path.join(split_dir, "manifest.json")
        save_manifest(manifest, intr, os.path.join("..", MODEL_FILE), shape.beta, frames)
        return manifest, np.array(thetas)

    train_params = list(range(spec.n_train_frames))
    hold_params = [(j + 0.5) * spec.n_train_frames / spec.n_holdout_frames
                   for j in range(spec.n_holdout_frames)]
    train_manifest, gt_thetas = write_split("train", train_params)
    holdout_manifest, _ = write_split("holdout", hold_params)

    noisy = gt_thetas.copy()
    if spec.pose_noise > 0.0:
        noisy = gt_thetas + rng.normal(scale=spec.pose_noise, size=gt_thetas.shape)
        import json
        with open(train_manifest) as fh:
            doc = json.load(fh)
        for i, fr in enumerate(doc["frames"]):
            fr["theta"] = noisy[i].ravel().tolist()
        with open(train_manifest, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)

    gt_path = os.path.join(out_dir, GT_CHECKPOINT)
    save_checkpoint(gt_path, Checkpoint(
        config={"synthetic_seed": seed},
        gaussians=gt,
        pose_theta=gt_thetas,
        pose_root=np.zeros((spec.n_train_frames, 3)),
        step=0,
    ))
    return SyntheticDataset(out_dir, train_manifest, holdout_manifest, model_path,
                            gt_path, gt_thetas, noisy, spec)
