"""Command-line interface.

Subcommands: generate, train, render, eval, export. Exit codes: 0 success,
1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from .checkpoint import Checkpoint, export_ply, load_checkpoint, save_checkpoint
from .dataset import load_dataset
from .deform import deform_gaussians
from .errors import BodySplatError
from .images import save_png, srgb_decode, srgb_encode
from .metrics import psnr, ssim
from .rasterizer import render
from .skinning import PoseParams
from .synthetic import SyntheticSpec, generate_synthetic
from .trainer import TrainConfig, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="bodysplat", description=__doc__)
    p.add_argument("--seed", type=int, default=None, help="global RNG seed")
    p.add_argument("--threads", type=int, default=None, help="numba thread cap")
    p.add_argument("--config", type=str, default=None, help="JSON file with TrainConfig fields")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--bones", type=int, default=4)
    g.add_argument("--vertices", type=int, default=800)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--frames", type=int, default=36)
    g.add_argument("--holdout", type=int, default=12)
    g.add_argument("--pose-noise", type=float, default=0.0)

    t = sub.add_parser("train", help="optimize a canonical model on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="output checkpoint path")
    t.add_argument("--total-steps", type=int, default=None)
    t.add_argument("--metrics", type=str, default=None, help="metrics CSV path")
    t.add_argument("--init-fraction", type=float, default=None)
    t.add_argument("--no-pose-refine", action="store_true")
    t.add_argument("--no-split", action="store_true")
    t.add_argument("--log-every", type=int, default=0)

    r = sub.add_parser("render", help="render one frame from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--pose-source", choices=("checkpoint", "dataset"), default="checkpoint")

    e = sub.add_parser("eval", help="PSNR/SSIM table for a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", type=str, default=None, help="CSV output path")
    e.add_argument("--pose-source", choices=("dataset", "checkpoint"), default="dataset")

    x = sub.add_parser("export", help="export a checkpoint to binary PLY")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    return p


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        with open(args.config) as fh:
            cfg = TrainConfig.from_dict({**cfg.to_dict(), **json.load(fh)})
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _checkpoint_background(ckpt) -> np.ndarray:
    bg = ckpt.config.get("background", (1.0, 1.0, 1.0)) if isinstance(ckpt.config, dict) else (1, 1, 1)
    return np.asarray(bg, dtype=np.float64)


def _frame_pose(ckpt, dataset, index: int, source: str) -> PoseParams:
    if source == "checkpoint" and index < ckpt.pose_theta.shape[0]:
        return PoseParams(ckpt.pose_theta[index], ckpt.pose_root[index])
    return dataset.frames[index].pose


def _render_frame(ckpt, dataset, grid, index: int, source: str) -> np.ndarray:
    pose = _frame_pose(ckpt, dataset, index, source)
    observed, _ = deform_gaussians(ckpt.gaussians, pose, dataset.beta,
                                   dataset.assets.skeleton, grid)
    img = render(observed, dataset.camera(index), _checkpoint_background(ckpt))
    return img.rgb


def cmd_generate(args) -> int:
    spec = SyntheticSpec(
        n_bones=args.bones, n_vertices=args.vertices, image_size=args.size,
        n_train_frames=args.frames, n_holdout_frames=args.holdout,
        pose_noise=args.pose_noise,
    )
    out = generate_synthetic(spec, args.out, seed=args.seed or 0)
    print(f"wrote {args.frames}+{args.holdout} frames under {out.root}")
    print(f"train manifest:   {out.train_manifest}")
    print(f"holdout manifest: {out.holdout_manifest}")
    print(f"ground truth:     {out.gt_checkpoint}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.total_steps is not None:
        cfg.total_steps = args.total_steps
    if args.init_fraction is not None:
        cfg.init_fraction = args.init_fraction
    if args.no_pose_refine:
        cfg.pose_refine_enabled = False
    if args.no_split:
        cfg.split_enabled = False
    dataset = load_dataset(args.dataset)
    result = train(cfg, dataset, metrics_path=args.metrics, log_every=args.log_every)
    save_checkpoint(args.out, Checkpoint(
        config=cfg.to_dict(),
        gaussians=result.gaussians,
        pose_theta=result.pose_theta,
        pose_root=result.pose_root,
        step=result.steps,
        optimizer_arrays=result.optimizer.export_arrays(),
    ))
    final = result.metrics_rows[-1] if result.metrics_rows else None
    if final:
        print(f"trained {result.steps} steps, final image loss {final[1]:.5f}, "
              f"{len(result.gaussians)} gaussians")
    print(f"checkpoint: {args.out}")
    return 0


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    if not (0 <= args.frame < len(dataset)):
        raise BodySplatError(f"frame {args.frame} out of range (dataset has {len(dataset)})")
    grid = dataset.assets.bake_grid()
    rgb = _render_frame(ckpt, dataset, grid, args.frame, args.pose_source)
    save_png(args.out, rgb)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    grid = dataset.assets.bake_grid()
    rows = []
    for i in range(len(dataset)):
        rendered = _render_frame(ckpt, dataset, grid, i, args.pose_source)
        # compare through the 8-bit PNG domain so stored frames can match exactly
        rendered = srgb_decode(srgb_encode(rendered))
        target = dataset.frames[i].image()
        rows.append((i, psnr(rendered, target), ssim(rendered, target)))
    mean_psnr = sum(r[1] for r in rows) / len(rows)
    mean_ssim = sum(r[2] for r in rows) / len(rows)

    def fmt(v):
        return "inf" if math.isinf(v) else f"{v:.6f}"

    lines = ["frame,psnr,ssim"]
    lines += [f"{i},{fmt(p)},{fmt(s)}" for i, p, s in rows]
    lines.append(f"mean,{fmt(mean_psnr)},{fmt(mean_ssim)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    export_ply(ckpt.gaussians, args.out)
    print(f"wrote {args.out} ({len(ckpt.gaussians)} vertices)")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "export": cmd_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.threads is not None:
        try:
            import numba
            numba.set_num_threads(max(1, args.threads))
        except Exception:
            pass  # kernels are sequential; the cap is best-effort
    try:
        return _COMMANDS[args.command](args)
    except BodySplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
