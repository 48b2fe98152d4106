"""Dataset and checkpoint serialization.

Dataset layout (the public on-disk contract):

    manifest.json                     cameras, bounds, frame list, version
    images/%04d.png  + images/%04d.pfm   8-bit preview + lossless float32
    depth/%04d.pfm                       1-channel
    flow_fw/%04d.pfm, flow_bw/%04d.pfm   3-channel scene flow
    mask/%04d.png                        binary

PFM files are little-endian (scale -1.0), rows bottom-to-top. Checkpoints are
a single .npz holding every named parameter, Adam moments, and a JSON header.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
from PIL import Image

from .rays import Camera
from .scenegen import SceneFrame

MANIFEST_VERSION = "1"
CHECKPOINT_VERSION = "1"


class DatasetError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, data):
    """data: (H, W) or (H, W, 1|3) float; stored as little-endian float32."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3 or data.shape[2] not in (1, 3):
        raise ValueError(f"PFM supports 1 or 3 channels, got shape {data.shape}")
    header = b"PF\n" if data.shape[2] == 3 else b"Pf\n"
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale: little-endian
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path):
    """Returns (H, W) for grayscale or (H, W, 3) for color, float32."""
    try:
        with open(path, "rb") as f:
            ident = f.readline().rstrip()
            if ident == b"PF":
                channels = 3
            elif ident == b"Pf":
                channels = 1
            else:
                raise DatasetError(f"{path}: not a PFM file (header {ident!r})")
            dims = f.readline().split()
            if len(dims) != 2:
                raise DatasetError(f"{path}: malformed PFM dimensions line")
            w, h = int(dims[0]), int(dims[1])
            scale = float(f.readline())
            endian = "<" if scale < 0 else ">"
            count = w * h * channels
            raw = f.read(count * 4)
            if len(raw) != count * 4:
                raise DatasetError(f"{path}: truncated PFM payload")
            data = np.frombuffer(raw, dtype=endian + "f4").reshape(h, w, channels)
    except OSError as e:
        raise DatasetError(f"{path}: {e}") from e
    data = np.flipud(data).copy()
    return data[:, :, 0] if channels == 1 else data


# ---------------------------------------------------------------------------
# PNG


def write_png(path, data):
    """data in [0, 1] (H, W, 3) or binary (H, W)."""
    data = np.asarray(data)
    if data.ndim == 2:
        arr = (data > 0.5).astype(np.uint8) * 255
        Image.fromarray(arr, mode="L").save(path)
    else:
        arr = np.clip(np.round(data * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(path)


def read_png(path):
    try:
        im = Image.open(path)
        arr = np.asarray(im)
    except OSError as e:
        raise DatasetError(f"{path}: {e}") from e
    if arr.ndim == 2:
        return arr > 127
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# dataset


def _camera_dict(c: Camera):
    return {
        "fx": c.fx,
        "fy": c.fy,
        "cx": c.cx,
        "cy": c.cy,
        "width": c.width,
        "height": c.height,
        "c2w": c.c2w.tolist(),
    }


def _camera_from_dict(d):
    return Camera(
        fx=d["fx"],
        fy=d["fy"],
        cx=d["cx"],
        cy=d["cy"],
        c2w=np.asarray(d["c2w"]),
        width=d["width"],
        height=d["height"],
    )


def write_dataset(frames, out_dir, near, far, name="scene"):
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("images", "depth", "flow_fw", "flow_bw", "mask"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "name": name,
        "near": near,
        "far": far,
        "width": frames[0].camera.width,
        "height": frames[0].camera.height,
        "frames": [],
    }
    for fr in frames:
        i = fr.index
        rec = {
            "index": i,
            "camera": _camera_dict(fr.camera),
            "image": f"images/{i:04d}.png",
            "image_pfm": f"images/{i:04d}.pfm",
            "depth": f"depth/{i:04d}.pfm",
            "flow_fw": f"flow_fw/{i:04d}.pfm",
            "flow_bw": f"flow_bw/{i:04d}.pfm",
            "mask": f"mask/{i:04d}.png",
        }
        write_png(os.path.join(out_dir, rec["image"]), fr.image)
        write_pfm(os.path.join(out_dir, rec["image_pfm"]), fr.image)
        write_pfm(os.path.join(out_dir, rec["depth"]), fr.depth)
        write_pfm(os.path.join(out_dir, rec["flow_fw"]), fr.flow_fw)
        write_pfm(os.path.join(out_dir, rec["flow_bw"]), fr.flow_bw)
        write_png(os.path.join(out_dir, rec["mask"]), fr.dyn_mask.astype(np.float64))
        manifest["frames"].append(rec)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def read_dataset(in_dir):
    """Returns (frames, near, far). Float fields come back from PFM losslessly."""
    man_path = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(man_path):
        raise DatasetError(f"{man_path}: missing manifest")
    with open(man_path) as f:
        manifest = json.load(f)
    version = manifest.get("format_version")
    if version != MANIFEST_VERSION:
        raise DatasetError(
            f"{man_path}: unsupported format_version {version!r} (expected {MANIFEST_VERSION!r})"
        )
    frames = []
    for rec in manifest["frames"]:
        def p(key):
            path = os.path.join(in_dir, rec[key])
            if not os.path.exists(path):
                raise DatasetError(f"{path}: missing dataset file")
            return path

        frames.append(
            SceneFrame(
                index=rec["index"],
                camera=_camera_from_dict(rec["camera"]),
                image=read_pfm(p("image_pfm")).astype(np.float64),
                depth=read_pfm(p("depth")).astype(np.float64),
                flow_fw=read_pfm(p("flow_fw")).astype(np.float64),
                flow_bw=read_pfm(p("flow_bw")).astype(np.float64),
                dyn_mask=read_png(p("mask")),
            )
        )
    return frames, manifest["near"], manifest["far"]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, opt_m, opt_v, meta):
    """params/opt_m/opt_v: name -> ndarray (moments may be empty dicts)."""
    header = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "precision": str(np.asarray(next(iter(params.values()))).dtype)
        if params
        else "float64",
        "param_names": sorted(params),
        **meta,
    }
    arrays = {f"p:{k}": np.asarray(v) for k, v in params.items()}
    arrays.update({f"m:{k}": np.asarray(v) for k, v in opt_m.items()})
    arrays.update({f"v:{k}": np.asarray(v) for k, v in opt_v.items()})
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns (params, opt_m, opt_v, header)."""
    try:
        with np.load(path) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as e:
        raise CheckpointError(f"{path}: {e}") from e
    if "__header__" not in data:
        raise CheckpointError(f"{path}: missing checkpoint header")
    header = json.loads(data.pop("__header__").tobytes().decode())
    if header.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint_version {header.get('checkpoint_version')!r}"
        )
    params = {k[2:]: v for k, v in data.items() if k.startswith("p:")}
    opt_m = {k[2:]: v for k, v in data.items() if k.startswith("m:")}
    opt_v = {k[2:]: v for k, v in data.items() if k.startswith("v:")}
    return params, opt_m, opt_v, header


def restore_params(tensors, saved):
    """Copy saved arrays into live parameter Tensors; all shapes must match."""
    mismatches = []
    missing = [k for k in tensors if k not in saved]
    extra = [k for k in saved if k not in tensors]
    for k, t in tensors.items():
        if k in saved and tuple(saved[k].shape) != tuple(t.values.shape):
            mismatches.append(f"{k}: checkpoint {saved[k].shape} vs model {t.values.shape}")
    if missing or extra or mismatches:
        parts = []
        if mismatches:
            parts.append("shape mismatches: " + "; ".join(mismatches))
        if missing:
            parts.append("missing from checkpoint: " + ", ".join(sorted(missing)))
        if extra:
            parts.append("unknown in checkpoint: " + ", ".join(sorted(extra)))
        raise CheckpointError("; ".join(parts))
    for k, t in tensors.items():
        t.values = saved[k].astype(t.values.dtype)
