"""Dataset and model-asset formats.

A dataset directory holds a JSON manifest, one PNG per frame, and a model
asset file shared by its splits:

    manifest.json
      version: 1
      camera:  {fx, fy, cx, cy, width, height, z_near}
      model:   relative path to the model-asset JSON
      beta:    10 floats
      frames:  [{image, world_to_camera (4x4), theta (3*n_joints),
                 root_translation (3)}]

    model.json
      version: 1
      parents, rest_local_transforms, template_vertices, template_weights,
      grid: {resolution, dilation_steps}

World-to-camera matrices must be rigid within 1e-6 and are snapped to the
nearest rotation on load. Images decode to linear RGB.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .deform import polar_rotation
from .errors import DatasetError
from .images import load_png
from .rasterizer import Camera
from .skinning import (
    PoseParams,
    ShapeParams,
    Skeleton,
    SkinnedTemplate,
    SkinWeightGrid,
    bake_weight_grid,
)

MANIFEST_VERSION = 1
MODEL_VERSION = 1
RIGID_TOL = 1e-6


@dataclass
class ModelAssets:
    skeleton: Skeleton
    template: SkinnedTemplate
    grid_resolution: tuple
    grid_dilation_steps: int

    def bake_grid(self) -> SkinWeightGrid:
        return bake_weight_grid(self.template, self.grid_resolution, self.grid_dilation_steps)


@dataclass
class Frame:
    image_path: str
    world_to_camera: np.ndarray  # (4, 4) rigid
    pose: PoseParams
    _image: np.ndarray = None

    def image(self) -> np.ndarray:
        if self._image is None:
            self._image = load_png(self.image_path)
        return self._image


@dataclass
class Dataset:
    root: str
    camera_intrinsics: dict
    frames: list
    assets: ModelAssets
    beta: ShapeParams

    def __len__(self) -> int:
        return len(self.frames)

    def camera(self, frame_index: int) -> Camera:
        c = self.camera_intrinsics
        return Camera(
            fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
            width=c["width"], height=c["height"],
            world_to_camera=self.frames[frame_index].world_to_camera,
            z_near=c.get("z_near", 0.01),
        )


def _require(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise DatasetError(f"{path}: {msg}")


def _snap_rigid(W: np.ndarray, path: str, what: str) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    _require(W.shape == (4, 4), path, f"{what} must be 4x4")
    _require(np.allclose(W[3], [0, 0, 0, 1], atol=RIGID_TOL), path, f"{what} bottom row must be (0,0,0,1)")
    R = W[:3, :3]
    err = max(np.max(np.abs(R @ R.T - np.eye(3))), abs(np.linalg.det(R) - 1.0))
    _require(err <= RIGID_TOL, path, f"{what} is not rigid (orthonormality error {err:.2e})")
    out = np.eye(4)
    out[:3, :3], _ = polar_rotation(R)
    out[:3, 3] = W[:3, 3]
    return out


def load_model_assets(path: str) -> ModelAssets:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"model asset file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed JSON ({exc})") from None
    _require(doc.get("version") == MODEL_VERSION, path, "unsupported model version")
    for key in ("parents", "rest_local_transforms", "template_vertices", "template_weights"):
        _require(key in doc, path, f"missing key {key!r}")
    try:
        skeleton = Skeleton(np.array(doc["parents"]), np.array(doc["rest_local_transforms"]))
        template = SkinnedTemplate(np.array(doc["template_vertices"]), np.array(doc["template_weights"]))
    except Exception as exc:
        raise DatasetError(f"{path}: {exc}") from None
    _require(template.bone_count == skeleton.joint_count, path,
             "template weight columns must match the joint count")
    grid = doc.get("grid", {})
    return ModelAssets(
        skeleton=skeleton,
        template=template,
        grid_resolution=tuple(grid.get("resolution", (64, 64, 64))),
        grid_dilation_steps=int(grid.get("dilation_steps", 4)),
    )


def save_model_assets(path: str, assets: ModelAssets) -> None:
    doc = {
        "version": MODEL_VERSION,
        "parents": assets.skeleton.parents.tolist(),
        "rest_local_transforms": assets.skeleton.rest_local_transforms.tolist(),
        "template_vertices": assets.template.vertices.tolist(),
        "template_weights": assets.template.weights.tolist(),
        "grid": {
            "resolution": list(assets.grid_resolution),
            "dilation_steps": assets.grid_dilation_steps,
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_dataset(path: str, load_images: bool = False) -> Dataset:
    """Parse and validate a manifest; images decode lazily unless requested."""
    manifest_path = path
    if os.path.isdir(path):
        manifest_path = os.path.join(path, "manifest.json")
    root = os.path.dirname(os.path.abspath(manifest_path))
    try:
        with open(manifest_path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: malformed JSON ({exc})") from None

    _require(doc.get("version") == MANIFEST_VERSION, manifest_path, "unsupported manifest version")
    for key in ("camera", "model", "beta", "frames"):
        _require(key in doc, manifest_path, f"missing key {key!r}")
    cam = doc["camera"]
    for key in ("fx", "fy", "cx", "cy", "width", "height"):
        _require(key in cam, manifest_path, f"camera block missing {key!r}")
    _require(cam["fx"] > 0 and cam["fy"] > 0, manifest_path, "focal lengths must be positive")
    _require(cam["width"] >= 1 and cam["height"] >= 1, manifest_path, "image size must be positive")

    model_path = os.path.join(root, doc["model"])
    assets = load_model_assets(model_path)
    n_joints = assets.skeleton.joint_count

    beta = np.asarray(doc["beta"], dtype=np.float64)
    _require(beta.shape == (10,), manifest_path, "beta must have 10 entries")

    frames = []
    for i, fr in enumerate(doc["frames"]):
        ctx = f"{manifest_path} frame {i}"
        for key in ("image", "world_to_camera", "theta", "root_translation"):
            _require(key in fr, ctx, f"missing key {key!r}")
        image_path = os.path.join(root, fr["image"])
        _require(os.path.isfile(image_path), ctx, f"image file missing: {image_path}")
        W = _snap_rigid(np.array(fr["world_to_camera"]), ctx, "world_to_camera")
        theta = np.asarray(fr["theta"], dtype=np.float64)
        _require(theta.shape == (3 * n_joints,), ctx,
                 f"theta must have {3 * n_joints} entries, got {theta.shape}")
        trans = np.asarray(fr["root_translation"], dtype=np.float64)
        _require(trans.shape == (3,), ctx, "root_translation must have 3 entries")
        pose = PoseParams(theta.reshape(n_joints, 3), trans)
        frames.append(Frame(image_path, W, pose))
    _require(len(frames) >= 1, manifest_path, "dataset has no frames")

    ds = Dataset(root, cam, frames, assets, ShapeParams(beta))
    if load_images:
        for fr in ds.frames:
            fr.image()
    return ds


def save_manifest(path: str, camera: dict, model_rel: str, beta: np.ndarray, frames: list) -> None:
    """frames: list of dicts with image, world_to_camera, theta, root_translation."""
    doc = {
        "version": MANIFEST_VERSION,
        "camera": camera,
        "model": model_rel,
        "beta": np.asarray(beta, dtype=np.float64).tolist(),
        "frames": frames,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
