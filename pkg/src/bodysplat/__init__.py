"""Animatable body reconstruction with canonical 3D Gaussians on the CPU."""

from .gaussians import (
    CANONICAL,
    OBSERVATION,
    ActivatedGaussians,
    GaussianSet,
    activate,
    build_covariance,
    evaluate_color,
    init_from_vertices,
    quat_to_rotmat,
)
from .skinning import (
    PoseParams,
    ShapeParams,
    Skeleton,
    SkinnedTemplate,
    SkinWeightGrid,
    bake_weight_grid,
    bone_transforms,
    lbs_transform,
    sample_weights,
)
from .deform import DeformRecord, deform_backward, deform_gaussians
from .rasterizer import Camera, RenderedImage, composite, project, render, render_backward
from .priors import NeighborGraph, build_knn, iso_loss, prior_total, rigid_loss, rot_loss
from .metrics import psnr, ssim
from .trainer import LossBreakdown, TrainConfig, image_loss, split_with_scale, train, train_step
from .dataset import Dataset, ModelAssets, load_dataset
from .synthetic import SyntheticSpec, generate_synthetic
from .checkpoint import Checkpoint, export_ply, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
