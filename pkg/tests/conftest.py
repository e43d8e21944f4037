import numpy as np
import pytest

from bodysplat.gaussians import OBSERVATION, GaussianSet
from bodysplat.skinning import (
    PoseParams,
    ShapeParams,
    Skeleton,
    SkinnedTemplate,
    bake_weight_grid,
)


def make_chain_skeleton(n_joints, base=(0.0, 0.9, 0.0), segment=(0.0, 0.3, 0.0)):
    """Simple kinematic chain: joint 0 at `base`, children offset by `segment`."""
    parents = np.full(n_joints, -1, dtype=np.int64)
    parents[1:] = np.arange(n_joints - 1)
    locals_ = np.tile(np.eye(4), (n_joints, 1, 1))
    locals_[0, :3, 3] = base
    for i in range(1, n_joints):
        locals_[i, :3, 3] = segment
    return Skeleton(parents, locals_)


def random_gaussians(rng, n, center=(0.0, 0.0, 2.0), spread=0.4, space=OBSERVATION,
                     logit_range=(-2.5, -0.5), scale_range=(0.05, 0.2)):
    positions = rng.uniform(-spread, spread, size=(n, 3)) + np.asarray(center)
    return GaussianSet(
        positions=positions,
        rotations=rng.normal(size=(n, 4)),
        log_scales=np.log(rng.uniform(*scale_range, size=(n, 3))),
        opacity_logits=rng.uniform(*logit_range, n),
        sh_coeffs=rng.normal(size=(n, 4, 3)) * 0.3,
        space=space,
    )


def constant_weight_grid(rng, n_bones, weights_row, center=(0.0, 0.9, 0.0), extent=0.25):
    """Weight grid whose field is spatially constant (exact fd checks)."""
    verts = rng.uniform(-extent, extent, size=(40, 3)) + np.asarray(center)
    tmpl = SkinnedTemplate(verts, np.tile(weights_row, (40, 1)))
    return bake_weight_grid(tmpl, (8, 8, 8), 2)


def fd_check(loss_fn, arr, analytic, h, rtol, floor=1e-7,
             nondiff_rtol=1e-3, nondiff_atol=1e-5):
    """Central-difference check with two-step nondifferentiability screening.

    Compares fd at h and h/2 first; parameters where the two disagree sit on
    a kink of the piecewise forward (opacity skip / termination thresholds)
    where central differences are meaningless, and are excluded. Returns
    (checked, skipped, worst_rel).
    """
    analytic = np.asarray(analytic)
    checked = skipped = 0
    worst = 0.0
    for j in range(arr.size):
        old = arr.flat[j]
        arr.flat[j] = old + h
        lp = loss_fn()
        arr.flat[j] = old - h
        lm = loss_fn()
        arr.flat[j] = old + h / 2
        lp2 = loss_fn()
        arr.flat[j] = old - h / 2
        lm2 = loss_fn()
        arr.flat[j] = old
        fd1 = (lp - lm) / (2.0 * h)
        fd2 = (lp2 - lm2) / h
        if abs(fd1 - fd2) > nondiff_atol + nondiff_rtol * max(abs(fd1), abs(fd2)):
            skipped += 1
            continue
        checked += 1
        rel = abs(analytic.flat[j] - fd1) / max(abs(analytic.flat[j]), abs(fd1), floor)
        worst = max(worst, rel)
        assert rel <= rtol, (
            f"flat index {j}: analytic {analytic.flat[j]:.6e} vs fd {fd1:.6e} (rel {rel:.2e})"
        )
    return checked, skipped, worst


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small synthetic dataset shared across io/trainer/cli tests."""
    from bodysplat.synthetic import SyntheticSpec, generate_synthetic

    root = tmp_path_factory.mktemp("tinyset")
    spec = SyntheticSpec(n_bones=3, n_vertices=180, image_size=64,
                         n_train_frames=5, n_holdout_frames=2,
                         grid_resolution=(24, 24, 24))
    return generate_synthetic(spec, str(root), seed=21)
