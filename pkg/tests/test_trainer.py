import numpy as np
import pytest

from bodysplat.dataset import load_dataset
from bodysplat.errors import InvalidParameterError
from bodysplat.gaussians import GaussianSet
from bodysplat.trainer import (
    AdamState,
    TrainConfig,
    TrainerState,
    image_loss,
    split_with_scale,
    train,
    train_step,
)

def checksum(gs: GaussianSet) -> bytes:
    import hashlib

    h = hashlib.sha256()
    for arr in (gs.positions, gs.rotations, gs.log_scales, gs.opacity_logits, gs.sh_coeffs):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.digest()


class TestImageLoss:
    def test_identical_zero(self):
        a = np.random.default_rng(80).uniform(size=(16, 16, 3))
        value, grad = image_loss(a, a.copy(), lambda_dssim=0.2)
        assert value == 0.0

    def test_pure_l1(self):
        a = np.zeros((8, 8, 3))
        b = np.ones((8, 8, 3))
        value, _ = image_loss(a, b, lambda_dssim=0.0)
        assert value == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidParameterError):
            image_loss(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)), 0.2)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(81)
        a = rng.uniform(0.1, 0.9, size=(32, 32, 3))
        b = rng.uniform(0.1, 0.9, size=(32, 32, 3))
        _, grad = image_loss(a, b, lambda_dssim=0.2)
        h = 1e-4
        worst = 0.0
        for _ in range(30):
            i, j, c = rng.integers(32), rng.integers(32), rng.integers(3)
            old = a[i, j, c]
            a[i, j, c] = old + h
            lp = image_loss(a, b, 0.2)[0]
            a[i, j, c] = old - h
            lm = image_loss(a, b, 0.2)[0]
            a[i, j, c] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(grad[i, j, c] - fd) / max(abs(fd), 1e-8))
        assert worst < 1e-4


class TestAdam:
    def test_zero_gradient_is_noop(self):
        opt = AdamState()
        p = np.array([1.0, 2.0, 3.0])
        opt.update("p", p, np.zeros(3), lr=0.1)
        assert np.array_equal(p, [1.0, 2.0, 3.0])

    def test_descends(self):
        opt = AdamState()
        p = np.array([4.0])
        for _ in range(200):
            opt.update("p", p, 2.0 * p, lr=0.1)  # d/dp p^2
        assert abs(p[0]) < 1.0

    def test_row_resize(self):
        opt = AdamState()
        p = np.ones((4, 3))
        opt.update("p", p, np.ones((4, 3)), lr=0.01)
        keep = np.array([True, False, True, True])
        opt.keep_rows("p", keep, 2)
        assert opt.m["p"].shape == (5, 3)
        assert np.all(opt.m["p"][3:] == 0.0)

    def test_round_trip_arrays(self):
        opt = AdamState()
        p = np.ones(3)
        opt.update("p", p, np.ones(3), lr=0.01)
        back = AdamState.from_arrays(opt.export_arrays())
        assert back.t["p"] == 1
        assert np.array_equal(back.m["p"], opt.m["p"])


class TestConfig:
    def test_round_trip(self):
        cfg = TrainConfig(total_steps=7, lambda_rigid=0.1, background=(0, 0, 0))
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()

    def test_unknown_key_rejected(self):
        with pytest.raises(InvalidParameterError):
            TrainConfig.from_dict({"no_such_knob": 1})

    def test_negative_lr_rejected(self):
        with pytest.raises(InvalidParameterError):
            TrainConfig(lr_position=-1.0)


class TestSplitWithScale:
    def _set(self, scales):
        n = scales.shape[0]
        rng = np.random.default_rng(82)
        return GaussianSet(
            positions=rng.normal(size=(n, 3)),
            rotations=rng.normal(size=(n, 4)),
            log_scales=np.log(scales),
            opacity_logits=rng.normal(size=n),
            sh_coeffs=rng.normal(size=(n, 4, 3)),
        )

    def test_no_oversized_unchanged(self):
        gs = self._set(np.full((10, 3), 0.01))
        out, n_split = split_with_scale(gs, 0.05, AdamState())
        assert n_split == 0 and out is gs

    def test_one_split_half_scale(self):
        scales = np.full((10, 3), 0.01)
        scales[4] = (0.09, 0.02, 0.01)
        gs = self._set(scales)
        out, n_split = split_with_scale(gs, 0.05, AdamState())
        assert n_split == 1 and len(out) == 11
        child_scales = np.exp(out.log_scales[-2:])
        assert np.allclose(child_scales, np.array([(0.045, 0.01, 0.005)] * 2))

    def test_children_symmetric_about_parent(self):
        scales = np.full((6, 3), 0.01)
        scales[2] = (0.08, 0.03, 0.02)
        gs = self._set(scales)
        parent_pos = gs.positions[2].copy()
        out, _ = split_with_scale(gs, 0.05, AdamState())
        mid = 0.5 * (out.positions[-2] + out.positions[-1])
        assert np.max(np.abs(mid - parent_pos)) < 1e-12

    def test_split_never_increases_max_scale(self):
        rng = np.random.default_rng(83)
        gs = self._set(rng.uniform(0.01, 0.2, size=(20, 3)))
        before = np.exp(gs.log_scales).max()
        out, _ = split_with_scale(gs, 0.05, AdamState())
        assert np.exp(out.log_scales).max() <= before + 1e-15

    def test_moment_shapes_follow(self):
        scales = np.full((5, 3), 0.01)
        scales[0] = 0.2
        gs = self._set(scales)
        opt = AdamState()
        opt.update("positions", gs.positions, np.ones_like(gs.positions), 1e-6)
        opt.update("sh_coeffs", gs.sh_coeffs, np.ones_like(gs.sh_coeffs), 1e-6)
        out, _ = split_with_scale(gs, 0.05, opt)
        assert opt.m["positions"].shape == out.positions.shape
        assert opt.m["sh_coeffs"].shape == out.sh_coeffs.shape

    def test_bad_eps_rejected(self):
        gs = self._set(np.full((4, 3), 0.01))
        with pytest.raises(InvalidParameterError):
            split_with_scale(gs, 0.0, AdamState())


def small_cfg(**kw):
    base = dict(total_steps=5, k=8, seed=3, densify_start=1, densify_end=10,
                densify_interval=2, eps_scale=10.0, knn_rebuild_interval=2)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_zero_steps_returns_initialization(self, tiny_dataset):
        ds = load_dataset(tiny_dataset.train_manifest)
        cfg = small_cfg(total_steps=0)
        res = train(cfg, ds)
        rng = np.random.default_rng(cfg.seed)
        from bodysplat.trainer import init_gaussians

        init = init_gaussians(ds, cfg, rng)
        assert checksum(res.gaussians) == checksum(init)

    def test_same_seed_identical_checksums(self, tiny_dataset):
        ds = load_dataset(tiny_dataset.train_manifest)
        a = train(small_cfg(), ds)
        b = train(small_cfg(), ds)
        assert checksum(a.gaussians) == checksum(b.gaussians)
        assert np.array_equal(a.pose_theta, b.pose_theta)

    def test_loss_breakdown_consistency(self, tiny_dataset):
        ds = load_dataset(tiny_dataset.train_manifest)
        cfg = small_cfg(total_steps=3)
        res = train(cfg, ds)
        for row in res.metrics_rows:
            _, image, rigid, rot, iso, total, _, _ = row
            expected = image + cfg.lambda_rigid * rigid + cfg.lambda_rot * rot + cfg.lambda_iso * iso
            assert abs(total - expected) < 1e-9

    def test_metrics_csv_columns(self, tiny_dataset, tmp_path):
        ds = load_dataset(tiny_dataset.train_manifest)
        path = tmp_path / "metrics.csv"
        train(small_cfg(total_steps=2), ds, metrics_path=str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == "step,image_loss,rigid,rot,iso,total,num_gaussians,ms_per_step"
        assert len(lines) == 3

    def test_pose_refine_disabled_keeps_poses(self, tiny_dataset):
        ds = load_dataset(tiny_dataset.train_manifest)
        res = train(small_cfg(pose_refine_enabled=False, total_steps=6), ds)
        original = np.array([f.pose.joint_rotations for f in ds.frames])
        assert np.array_equal(res.pose_theta, original)

    def test_pose_refine_enabled_moves_poses(self, tiny_dataset):
        ds = load_dataset(tiny_dataset.train_manifest)
        res = train(small_cfg(pose_refine_enabled=True, total_steps=6), ds)
        original = np.array([f.pose.joint_rotations for f in ds.frames])
        assert not np.array_equal(res.pose_theta, original)

    def test_prior_terms_zero_vs_positive(self, tiny_dataset):
        ds = load_dataset(tiny_dataset.train_manifest)
        res_off = train(small_cfg(total_steps=2, lambda_rigid=0.0, lambda_rot=0.0,
                                  lambda_iso=0.0), ds)
        for row in res_off.metrics_rows:
            assert row[2] == 0.0 and row[3] == 0.0 and row[4] == 0.0
        res_on = train(small_cfg(total_steps=2), ds)
        assert any(row[2] > 0.0 for row in res_on.metrics_rows)

    def test_frozen_updates_keep_parameters(self, tiny_dataset):
        # zero effective update: all-zero gradients cannot occur, so freeze by
        # relying on Adam's zero-gradient no-op via lambda=0 and lr checks is
        # impossible; instead verify repeatability: identical state -> identical loss
        ds = load_dataset(tiny_dataset.train_manifest)
        cfg = small_cfg(total_steps=1)
        a = train(cfg, ds).metrics_rows[0]
        b = train(cfg, ds).metrics_rows[0]
        assert a[:7] == b[:7]


class TestZeroLearningRates:
    def test_parameters_and_loss_frozen(self, tiny_dataset):
        # spec: with all learning rates zero the loss trace is constant
        ds = load_dataset(tiny_dataset.train_manifest)
        cfg = small_cfg(total_steps=4)
        for name in ("lr_position", "lr_rotation", "lr_scale", "lr_opacity", "lr_sh", "lr_pose"):
            setattr(cfg, name, 0.0)
        rng = np.random.default_rng(cfg.seed)
        from bodysplat.trainer import init_gaussians

        init = init_gaussians(ds, cfg, rng)
        res = train(cfg, ds, initial=init)
        assert checksum(res.gaussians) == checksum(init)
        # same frame revisited must reproduce the loss bit-exactly
        by_frame = {}
        ds_order = np.random.default_rng(cfg.seed).permutation(len(ds))
        for row, f in zip(res.metrics_rows, ds_order):
            if f in by_frame:
                assert row[1:6] == by_frame[f]
            else:
                by_frame[f] = row[1:6]


class TestPoseRefineUpdate:
    def test_frame_index_out_of_range(self, tiny_dataset):
        from bodysplat.trainer import init_gaussians, pose_refine_update

        ds = load_dataset(tiny_dataset.train_manifest)
        cfg = small_cfg(total_steps=0)
        rng = np.random.default_rng(0)
        state = TrainerState(
            config=cfg, dataset=ds, gaussians=init_gaussians(ds, cfg, rng),
            grid=ds.assets.bake_grid(),
            pose_theta=np.array([f.pose.joint_rotations for f in ds.frames]),
            pose_root=np.array([f.pose.root_translation for f in ds.frames]),
        )
        n = ds.assets.skeleton.joint_count
        with pytest.raises(InvalidParameterError):
            pose_refine_update(state, 99, np.zeros((n, 3)), np.zeros(3))


class TestSingleFrameOverfit:
    def test_image_loss_quarters_in_500_steps(self, tmp_path):
        from bodysplat.synthetic import SyntheticSpec, generate_synthetic

        spec = SyntheticSpec(n_bones=2, n_vertices=50, image_size=64,
                             n_train_frames=1, n_holdout_frames=1,
                             grid_resolution=(20, 20, 20))
        out = generate_synthetic(spec, str(tmp_path / "overfit"), seed=4)
        ds = load_dataset(out.train_manifest)
        cfg = TrainConfig(total_steps=500, k=10, seed=0, split_enabled=False)
        res = train(cfg, ds)
        first = res.metrics_rows[0][1]
        last = res.metrics_rows[-1][1]
        assert last < 0.25 * first
