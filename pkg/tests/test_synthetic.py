import filecmp
import os

import numpy as np
import pytest

from bodysplat.checkpoint import load_checkpoint
from bodysplat.dataset import load_dataset
from bodysplat.deform import deform_gaussians
from bodysplat.errors import InvalidParameterError
from bodysplat.images import srgb_encode
from bodysplat.rasterizer import render
from bodysplat.skinning import PoseParams
from bodysplat.synthetic import SyntheticSpec, generate_synthetic, motion_pose


class TestSpecValidation:
    def test_bone_range(self):
        with pytest.raises(InvalidParameterError):
            SyntheticSpec(n_bones=1)
        with pytest.raises(InvalidParameterError):
            SyntheticSpec(n_bones=9)


class TestGenerate:
    def test_two_bone_dataset_loads(self, tmp_path):
        spec = SyntheticSpec(n_bones=2, n_vertices=120, image_size=32,
                             n_train_frames=3, n_holdout_frames=1,
                             grid_resolution=(16, 16, 16))
        out = generate_synthetic(spec, str(tmp_path / "d"), seed=5)
        ds = load_dataset(out.train_manifest)
        assert len(ds) == 3
        assert ds.assets.skeleton.joint_count == 2
        hold = load_dataset(out.holdout_manifest)
        assert len(hold) == 1

    def test_gt_reproduces_frames_bit_exactly(self, tiny_dataset):
        ds = load_dataset(tiny_dataset.train_manifest)
        ckpt = load_checkpoint(tiny_dataset.gt_checkpoint)
        grid = ds.assets.bake_grid()
        for i in range(len(ds)):
            pose = PoseParams(ckpt.pose_theta[i], ckpt.pose_root[i])
            obs, _ = deform_gaussians(ckpt.gaussians, pose, ds.beta,
                                      ds.assets.skeleton, grid)
            img = render(obs, ds.camera(i), np.array([1.0, 1.0, 1.0]))
            assert np.array_equal(srgb_encode(img.rgb), srgb_encode(ds.frames[i].image()))

    def test_half_rotation_yaw(self):
        spec = SyntheticSpec(n_train_frames=36, yaw_turns=1.0)
        p0 = motion_pose(spec, 0)
        p18 = motion_pose(spec, 18)
        assert p0.joint_rotations[0, 1] == 0.0
        assert abs(p18.joint_rotations[0, 1] - np.pi) < 1e-12

    def test_determinism_byte_identical(self, tmp_path):
        spec = SyntheticSpec(n_bones=2, n_vertices=80, image_size=32,
                             n_train_frames=2, n_holdout_frames=1,
                             grid_resolution=(12, 12, 12))
        a = generate_synthetic(spec, str(tmp_path / "a"), seed=7)
        b = generate_synthetic(spec, str(tmp_path / "b"), seed=7)
        for rel in ("train/manifest.json", "train/frames/f0000.png", "model.json",
                    "ground_truth.bsc", "holdout/frames/f0000.png"):
            assert filecmp.cmp(os.path.join(a.root, rel), os.path.join(b.root, rel),
                               shallow=False), rel

    def test_pose_noise_only_in_train_manifest(self, tmp_path):
        spec = SyntheticSpec(n_bones=2, n_vertices=80, image_size=32,
                             n_train_frames=3, n_holdout_frames=1,
                             grid_resolution=(12, 12, 12), pose_noise=0.05)
        out = generate_synthetic(spec, str(tmp_path / "n"), seed=9)
        assert not np.array_equal(out.noisy_poses, out.gt_poses)
        ds = load_dataset(out.train_manifest)
        manifest_thetas = np.array([f.pose.joint_rotations for f in ds.frames])
        assert np.allclose(manifest_thetas, out.noisy_poses)
        ckpt = load_checkpoint(out.gt_checkpoint)
        assert np.array_equal(ckpt.pose_theta, out.gt_poses)
