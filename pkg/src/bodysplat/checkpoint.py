"""Checkpoint container and point-cloud export.

Checkpoint layout (all little-endian):

    bytes 0..3   magic  b"BSPC"
    bytes 4..7   uint32 format version
    bytes 8..15  uint64 JSON header length
    header       UTF-8 JSON: config snapshot, step counter, sh degree and an
                 array manifest [{name, dtype, shape, offset, nbytes}]
    payload      raw array bytes at the stated offsets

Floats are stored verbatim, so save -> load -> save is byte-identical.

The PLY export writes binary little-endian vertices with properties
    x, y, z                       float32  position (m)
    red, green, blue              uchar    activated DC color
    opacity                       float32  activated opacity
    scale_x, scale_y, scale_z     float32  activated scales (m)
    rot_w, rot_x, rot_y, rot_z    float32  unit quaternion
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, InvalidParameterError
from .gaussians import CANONICAL, GaussianSet, activate, dc_to_rgb

MAGIC = b"BSPC"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    gaussians: GaussianSet
    pose_theta: np.ndarray   # (F, n_joints, 3) refined axis-angle bank
    pose_root: np.ndarray    # (F, 3)
    step: int = 0
    optimizer_arrays: dict = field(default_factory=dict)  # name -> ndarray


def _array_manifest(arrays: dict) -> tuple[list, int]:
    manifest = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        manifest.append({
            "name": name,
            "dtype": arr.dtype.str,      # e.g. '<f8'
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        offset += arr.nbytes
    return manifest, offset


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    gs = ckpt.gaussians
    arrays = {
        "positions": gs.positions.astype("<f8"),
        "rotations": gs.rotations.astype("<f8"),
        "log_scales": gs.log_scales.astype("<f8"),
        "opacity_logits": gs.opacity_logits.astype("<f8"),
        "sh_coeffs": gs.sh_coeffs.astype("<f8"),
        "pose_theta": np.asarray(ckpt.pose_theta, dtype="<f8"),
        "pose_root": np.asarray(ckpt.pose_root, dtype="<f8"),
    }
    for name, arr in ckpt.optimizer_arrays.items():
        arrays["opt/" + name] = np.asarray(arr, dtype="<f8")

    manifest, total = _array_manifest(arrays)
    header = json.dumps(
        {"config": ckpt.config, "step": ckpt.step, "space": gs.space, "arrays": manifest},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        fh.write(np.uint64(len(header)).tobytes())
        fh.write(header)
        for entry in manifest:
            fh.write(np.ascontiguousarray(arrays[entry["name"]]).tobytes())
    del total


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise DatasetError(f"checkpoint not found: {path}") from None
    if blob[:4] != MAGIC:
        raise DatasetError(f"{path}: not a checkpoint file (bad magic)")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise DatasetError(f"{path}: unsupported checkpoint version {version}")
    hlen = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen

    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        raw = blob[start:start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])) \
            .reshape(entry["shape"]).copy()

    gs = GaussianSet(
        positions=arrays["positions"],
        rotations=arrays["rotations"],
        log_scales=arrays["log_scales"],
        opacity_logits=arrays["opacity_logits"],
        sh_coeffs=arrays["sh_coeffs"],
        space=header.get("space", CANONICAL),
    )
    opt = {k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")}
    return Checkpoint(
        config=header["config"],
        gaussians=gs,
        pose_theta=arrays["pose_theta"],
        pose_root=arrays["pose_root"],
        step=int(header["step"]),
        optimizer_arrays=opt,
    )


PLY_PROPERTIES = [
    ("x", "f4"), ("y", "f4"), ("z", "f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("opacity", "f4"),
    ("scale_x", "f4"), ("scale_y", "f4"), ("scale_z", "f4"),
    ("rot_w", "f4"), ("rot_x", "f4"), ("rot_y", "f4"), ("rot_z", "f4"),
]

_PLY_TYPE = {"f4": "float", "u1": "uchar"}


def export_ply(gset: GaussianSet, path: str) -> None:
    gset.validate()
    act = activate(gset)
    n = len(gset)
    rec = np.empty(n, dtype=[(name, dt) for name, dt in PLY_PROPERTIES])
    rec["x"], rec["y"], rec["z"] = act.positions.astype(np.float32).T
    color = np.round(dc_to_rgb(act.sh_coeffs[:, 0, :]) * 255.0).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = color.T
    rec["opacity"] = act.opacities.astype(np.float32)
    rec["scale_x"], rec["scale_y"], rec["scale_z"] = act.scales.astype(np.float32).T
    rec["rot_w"], rec["rot_x"], rec["rot_y"], rec["rot_z"] = act.rotations.astype(np.float32).T

    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property {_PLY_TYPE[dt]} {name}" for name, dt in PLY_PROPERTIES]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(rec.tobytes())
    except OSError as exc:
        raise DatasetError(f"cannot write PLY {path}: {exc}") from None


def parse_ply(path: str) -> np.ndarray:
    """Read back a PLY written by export_ply as a structured array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.index(b"end_header\n") + len(b"end_header\n")
    header = blob[:end].decode("ascii").splitlines()
    if header[0] != "ply" or "format binary_little_endian 1.0" not in header[1]:
        raise InvalidParameterError(f"{path}: unsupported PLY flavor")
    n = None
    props = []
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property"):
            _, typ, name = line.split()
            dt = {"float": "<f4", "uchar": "u1"}[typ]
            props.append((name, dt))
    return np.frombuffer(blob[end:], dtype=props, count=n)
