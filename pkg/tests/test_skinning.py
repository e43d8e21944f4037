import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from bodysplat.errors import InvalidParameterError
from bodysplat.skinning import (
    PoseParams,
    ShapeParams,
    Skeleton,
    SkinnedTemplate,
    SkinWeightGrid,
    bake_weight_grid,
    bone_transform_jacobians,
    bone_transforms,
    lbs_transform,
    sample_weights,
)
from conftest import make_chain_skeleton


def brute_force_bones(skeleton, pose, shape):
    """Independent FK oracle: explicit chain products with scipy rotations."""
    n = skeleton.joint_count
    locals_ = skeleton.rest_local_transforms.copy()
    for i in range(1, n):
        locals_[i, :3, 3] *= 1.0 + shape.beta[i % 10]
    out = np.empty((n, 4, 4))
    for k in range(n):
        chain = [k]
        while skeleton.parents[chain[0]] >= 0:
            chain.insert(0, skeleton.parents[chain[0]])
        posed = np.eye(4)
        rest = np.eye(4)
        for j in chain:
            rot = np.eye(4)
            rot[:3, :3] = Rotation.from_rotvec(pose.joint_rotations[j]).as_matrix()
            posed = posed @ locals_[j] @ rot
            rest = rest @ locals_[j]
        troot = np.eye(4)
        troot[:3, 3] = pose.root_translation
        out[k] = troot @ posed @ np.linalg.inv(rest)
    return out


class TestBoneTransforms:
    def test_rest_pose_identity(self):
        sk = make_chain_skeleton(4)
        B = bone_transforms(sk, PoseParams(np.zeros((4, 3)), np.zeros(3)), ShapeParams.neutral())
        assert np.max(np.abs(B - np.eye(4))) < 1e-15

    def test_pure_root_translation(self):
        sk = make_chain_skeleton(3)
        t = np.array([0.2, -0.1, 0.4])
        B = bone_transforms(sk, PoseParams(np.zeros((3, 3)), t), ShapeParams.neutral())
        expected = np.eye(4)
        expected[:3, 3] = t
        assert np.max(np.abs(B - expected)) < 1e-15

    def test_child_rotation_about_pivot(self):
        sk = make_chain_skeleton(2, base=(0.0, 1.0, 0.0), segment=(0.0, 0.5, 0.0))
        theta = np.zeros((2, 3))
        theta[1, 2] = np.pi / 2  # 90 degrees about z at the child joint
        pose = PoseParams(theta, np.zeros(3))
        B = bone_transforms(sk, pose, ShapeParams.neutral())
        oracle = brute_force_bones(sk, pose, ShapeParams.neutral())
        assert np.max(np.abs(B - oracle)) < 1e-12
        # a point at the child pivot stays put; offsets rotate about it
        pivot = np.array([0.0, 1.5, 0.0, 1.0])
        assert np.allclose(B[1] @ pivot, pivot, atol=1e-12)
        tip = pivot + np.array([0.1, 0.0, 0.0, 0.0])
        assert np.allclose((B[1] @ tip)[:3], pivot[:3] + [0.0, 0.1, 0.0], atol=1e-12)

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(10)
        for trial in range(5):
            n = int(rng.integers(2, 7))
            sk = make_chain_skeleton(n)
            pose = PoseParams(rng.normal(size=(n, 3)) * 0.6, rng.normal(size=3) * 0.2)
            shape = ShapeParams(rng.normal(size=10) * 0.1)
            B = bone_transforms(sk, pose, shape)
            assert np.max(np.abs(B - brute_force_bones(sk, pose, shape))) < 1e-12

    def test_joint_count_mismatch(self):
        sk = make_chain_skeleton(3)
        with pytest.raises(InvalidParameterError):
            bone_transforms(sk, PoseParams(np.zeros((2, 3)), np.zeros(3)), ShapeParams.neutral())

    def test_pose_jacobians_vs_finite_differences(self):
        rng = np.random.default_rng(11)
        n = 4
        sk = make_chain_skeleton(n)
        shape = ShapeParams(rng.normal(size=10) * 0.05)
        pose = PoseParams(rng.normal(size=(n, 3)) * 0.5, rng.normal(size=3) * 0.1)
        B, dB = bone_transform_jacobians(sk, pose, shape)
        assert np.max(np.abs(B - bone_transforms(sk, pose, shape))) < 1e-12
        h = 1e-6
        for j in range(n):
            for q in range(3):
                tp = pose.joint_rotations.copy()
                tm = pose.joint_rotations.copy()
                tp[j, q] += h
                tm[j, q] -= h
                fd = (bone_transforms(sk, PoseParams(tp, pose.root_translation), shape)
                      - bone_transforms(sk, PoseParams(tm, pose.root_translation), shape)) / (2 * h)
                denom = max(np.max(np.abs(fd)), 1e-6)
                assert np.max(np.abs(dB[:, j, q] - fd)) / denom < 1e-5

    def test_beta_scales_bone_lengths(self):
        sk = make_chain_skeleton(3, base=(0.0, 0.0, 0.0), segment=(0.0, 0.4, 0.0))
        beta = np.zeros(10)
        beta[1] = 0.5  # joint 1 offset scaled by 1.5
        theta = np.zeros((3, 3))
        theta[1, 2] = np.pi / 2  # rotate the joint whose pivot beta moves
        pose = PoseParams(theta, np.zeros(3))
        B0 = bone_transforms(sk, pose, ShapeParams.neutral())
        B1 = bone_transforms(sk, pose, ShapeParams(beta))
        # joint 1 rest pivot sits at 0.4 m (neutral) vs 0.6 m (scaled); the
        # rotation about the displaced pivot transforms points differently
        pivot0 = np.array([0.0, 0.4, 0.0, 1.0])
        pivot1 = np.array([0.0, 0.6, 0.0, 1.0])
        assert np.allclose(B0[1] @ pivot0, pivot0, atol=1e-12)
        assert np.allclose(B1[1] @ pivot1, pivot1, atol=1e-12)
        assert np.linalg.norm((B1[1] @ pivot0 - pivot0)[:3]) > 0.05


class TestSkeletonValidation:
    def test_bad_topology(self):
        locals_ = np.tile(np.eye(4), (2, 1, 1))
        with pytest.raises(InvalidParameterError):
            Skeleton(np.array([-1, 1]), locals_)

    def test_two_roots(self):
        locals_ = np.tile(np.eye(4), (2, 1, 1))
        with pytest.raises(InvalidParameterError):
            Skeleton(np.array([-1, -1]), locals_)

    def test_nonrigid_rest(self):
        locals_ = np.tile(np.eye(4), (1, 1, 1))
        locals_[0, 0, 0] = 2.0
        with pytest.raises(InvalidParameterError):
            Skeleton(np.array([-1]), locals_)

    def test_pose_magnitude_warning(self):
        with pytest.warns(UserWarning):
            PoseParams(np.array([[7.0, 0.0, 0.0]]), np.zeros(3))


class TestWeightGrid:
    def test_node_at_vertex_dominates(self):
        # resolution chosen so a lattice node lands exactly on vertex 0; the
        # other vertices are >= 1 m away so the inverse-distance blend is
        # dominated by the zero-distance hit
        verts = np.array([
            [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
            [1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 1.0],
        ])
        w = np.zeros((8, 2))
        w[:4, 0] = 1.0
        w[4:, 1] = 1.0
        tmpl = SkinnedTemplate(verts, w)
        grid = bake_weight_grid(tmpl, (13, 13, 13), 2)
        node = grid.node_position(np.array([1, 1, 1]))
        assert np.max(np.abs(node - verts[0])) < 1e-12
        out = sample_weights(grid, node)
        assert np.max(np.abs(out - w[0])) < 1e-6

    def test_constant_field(self):
        rng = np.random.default_rng(12)
        verts = rng.uniform(0, 1, size=(60, 3))
        w = np.zeros((60, 3))
        w[:, 0] = 1.0
        grid = bake_weight_grid(SkinnedTemplate(verts, w), (12, 12, 12), 2)
        assert np.allclose(grid.weights[..., 0], 1.0)
        assert np.allclose(grid.weights[..., 1:], 0.0)
        pts = rng.uniform(-0.5, 1.5, size=(50, 3))
        out = sample_weights(grid, pts)
        assert np.allclose(out[:, 0], 1.0)

    def test_two_bone_ramp(self):
        rng = np.random.default_rng(13)
        n = 4000
        verts = rng.uniform(0, 1, size=(n, 3))
        w = np.column_stack([verts[:, 0], 1.0 - verts[:, 0]])  # linear ramp in x
        grid = bake_weight_grid(SkinnedTemplate(verts, w), (16, 16, 16), 2)
        pts = rng.uniform(0.1, 0.9, size=(100, 3))
        out = sample_weights(grid, pts)
        assert np.max(np.abs(out[:, 0] - pts[:, 0])) < 0.05

    def test_partition_of_unity_everywhere(self):
        rng = np.random.default_rng(14)
        verts = rng.uniform(-0.2, 0.2, size=(50, 3))
        w = rng.uniform(0.05, 1.0, size=(50, 4))
        w /= w.sum(axis=1, keepdims=True)
        grid = bake_weight_grid(SkinnedTemplate(verts, w), (10, 10, 10), 1)
        pts = rng.uniform(-1.0, 1.0, size=(300, 3))  # includes out-of-bbox points
        out = sample_weights(grid, pts)
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-9
        assert np.all(out >= 0.0)

    def test_trilinear_midpoint(self):
        # hand-built 2x2x2 grid: bone-0 weight 0.2 on one x-face, 0.8 on the other
        weights = np.zeros((2, 2, 2, 2))
        weights[0, ..., 0] = 0.2
        weights[0, ..., 1] = 0.8
        weights[1, ..., 0] = 0.8
        weights[1, ..., 1] = 0.2
        grid = SkinWeightGrid(np.zeros(3), np.ones(3), (2, 2, 2), weights,
                              np.ones((2, 2, 2), dtype=bool))
        out = sample_weights(grid, np.array([0.5, 0.25, 0.75]))
        assert np.allclose(out, [0.5, 0.5], atol=1e-12)

    def test_node_center_exact(self):
        rng = np.random.default_rng(15)
        weights = rng.uniform(0.1, 1.0, size=(3, 3, 3, 3))
        weights /= weights.sum(axis=-1, keepdims=True)
        grid = SkinWeightGrid(np.zeros(3), np.ones(3), (3, 3, 3), weights,
                              np.ones((3, 3, 3), dtype=bool))
        out = sample_weights(grid, np.array([0.5, 1.0, 0.0]))
        assert np.allclose(out, weights[1, 2, 0], atol=1e-12)

    def test_zero_sum_fallback(self):
        weights = np.zeros((2, 2, 2, 2))
        weights[1, 1, 1] = [0.3, 0.7]
        occ = np.zeros((2, 2, 2), dtype=bool)
        occ[1, 1, 1] = True
        grid = SkinWeightGrid(np.zeros(3), np.ones(3), (2, 2, 2), weights, occ)
        out = sample_weights(grid, np.array([0.0, 0.0, 0.0]))  # all-empty corner
        assert np.allclose(out, [0.3, 0.7])


class TestLbsTransform:
    def test_one_hot(self):
        rng = np.random.default_rng(16)
        sk = make_chain_skeleton(3)
        pose = PoseParams(rng.normal(size=(3, 3)) * 0.4, rng.normal(size=3) * 0.1)
        B = bone_transforms(sk, pose, ShapeParams.neutral())
        for j in range(3):
            w = np.zeros(3)
            w[j] = 1.0
            assert np.array_equal(lbs_transform(w, B), B[j])

    def test_rest_pose_identity(self):
        sk = make_chain_skeleton(3)
        B = bone_transforms(sk, PoseParams(np.zeros((3, 3)), np.zeros(3)), ShapeParams.neutral())
        D = lbs_transform(np.array([0.2, 0.3, 0.5]), B)
        assert np.max(np.abs(D - np.eye(4))) < 1e-15

    def test_translation_blend(self):
        B = np.tile(np.eye(4), (2, 1, 1))
        B[0, :3, 3] = [1.0, 0.0, 0.0]
        B[1, :3, 3] = [0.0, 2.0, 0.0]
        D = lbs_transform(np.array([0.5, 0.5]), B)
        assert np.allclose(D[:3, 3], [0.5, 1.0, 0.0])

    def test_weight_sum_violation(self):
        B = np.tile(np.eye(4), (2, 1, 1))
        with pytest.raises(InvalidParameterError):
            lbs_transform(np.array([0.6, 0.6]), B)

    def test_bottom_row(self):
        rng = np.random.default_rng(17)
        sk = make_chain_skeleton(4)
        pose = PoseParams(rng.normal(size=(4, 3)) * 0.5, rng.normal(size=3))
        B = bone_transforms(sk, pose, ShapeParams.neutral())
        w = rng.uniform(0.1, 1.0, size=(20, 4))
        w /= w.sum(axis=1, keepdims=True)
        D = lbs_transform(w, B)
        assert np.max(np.abs(D[:, 3, :] - np.array([0.0, 0, 0, 1.0]))) < 1e-9
