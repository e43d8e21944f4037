import filecmp
import os

import numpy as np
import pytest

from bodysplat.checkpoint import (
    Checkpoint,
    export_ply,
    load_checkpoint,
    parse_ply,
    save_checkpoint,
)
from bodysplat.errors import DatasetError
from bodysplat.gaussians import GaussianSet, activate


def make_checkpoint(rng, n=7):
    gs = GaussianSet(
        positions=rng.normal(size=(n, 3)),
        rotations=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(-4, -1, size=(n, 3)),
        opacity_logits=rng.normal(size=n),
        sh_coeffs=rng.normal(size=(n, 4, 3)),
    )
    return Checkpoint(
        config={"total_steps": 5, "seed": 1},
        gaussians=gs,
        pose_theta=rng.normal(size=(3, 2, 3)),
        pose_root=rng.normal(size=(3, 3)),
        step=5,
        optimizer_arrays={"m/positions": rng.normal(size=(n, 3)),
                          "t/positions": np.array([5.0])},
    )


class TestCheckpointRoundTrip:
    def test_save_load_save_byte_identical(self, tmp_path):
        ckpt = make_checkpoint(np.random.default_rng(100))
        p1 = tmp_path / "a.bsc"
        p2 = tmp_path / "b.bsc"
        save_checkpoint(str(p1), ckpt)
        back = load_checkpoint(str(p1))
        save_checkpoint(str(p2), back)
        assert filecmp.cmp(p1, p2, shallow=False)

    def test_values_exact(self, tmp_path):
        ckpt = make_checkpoint(np.random.default_rng(101))
        path = tmp_path / "c.bsc"
        save_checkpoint(str(path), ckpt)
        back = load_checkpoint(str(path))
        assert np.array_equal(back.gaussians.positions, ckpt.gaussians.positions)
        assert np.array_equal(back.gaussians.sh_coeffs, ckpt.gaussians.sh_coeffs)
        assert np.array_equal(back.pose_theta, ckpt.pose_theta)
        assert back.step == 5
        assert back.config["total_steps"] == 5
        assert np.array_equal(back.optimizer_arrays["m/positions"],
                              ckpt.optimizer_arrays["m/positions"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            load_checkpoint(str(tmp_path / "missing.bsc"))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bsc"
        path.write_bytes(b"JUNKxxxxxxxxxxxxxxxx")
        with pytest.raises(DatasetError, match="magic"):
            load_checkpoint(str(path))


class TestPly:
    def test_vertex_count_and_round_trip(self, tmp_path):
        rng = np.random.default_rng(102)
        ckpt = make_checkpoint(rng, n=4)
        path = tmp_path / "cloud.ply"
        export_ply(ckpt.gaussians, str(path))
        rec = parse_ply(str(path))
        assert rec.shape[0] == 4
        header = path.read_bytes().split(b"end_header")[0].decode()
        assert "element vertex 4" in header
        act = activate(ckpt.gaussians)
        pos = np.column_stack([rec["x"], rec["y"], rec["z"]])
        assert np.allclose(pos, act.positions, atol=1e-6)  # float32 storage
        quats = np.column_stack([rec["rot_w"], rec["rot_x"], rec["rot_y"], rec["rot_z"]])
        assert np.allclose(quats, act.rotations, atol=1e-6)
        scales = np.column_stack([rec["scale_x"], rec["scale_y"], rec["scale_z"]])
        assert np.allclose(scales, act.scales, rtol=1e-6)
        assert np.allclose(rec["opacity"], act.opacities, atol=1e-6)

    def test_export_twice_byte_identical(self, tmp_path):
        ckpt = make_checkpoint(np.random.default_rng(103), n=6)
        a = tmp_path / "a.ply"
        b = tmp_path / "b.ply"
        export_ply(ckpt.gaussians, str(a))
        export_ply(ckpt.gaussians, str(b))
        assert filecmp.cmp(a, b, shallow=False)

    def test_unwritable_path(self, tmp_path):
        ckpt = make_checkpoint(np.random.default_rng(104), n=4)
        with pytest.raises(DatasetError):
            export_ply(ckpt.gaussians, str(tmp_path / "no_dir" / "x.ply"))
