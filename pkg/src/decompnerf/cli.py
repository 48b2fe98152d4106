"""Command-line surface: scene generation, training, rendering, evaluation,
the ablation ladder, and the self-verification suites.

Exit codes: 0 success, 1 failed verification or aborted run, 2 usage errors
(bad flags, missing files, malformed configs).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from .checks import run_suite
from .dataio import (
    CheckpointError,
    DatasetError,
    load_checkpoint,
    read_dataset,
    read_pfm,
    restore_params,
    write_dataset,
    write_pfm,
    write_png,
)
from .metrics import psnr, ssim
from .pipeline import LAYER_NAMES, Pipeline, clip_proxy, render_image
from .rays import Camera, look_at
from .scenegen import Actor, BUILTIN_SPECS, SceneSpec, generate_scene, _pinhole
from .training import Trainer, TrainConfig, TrainingAborted, parse_config


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _load_spec(name_or_path):
    if name_or_path in BUILTIN_SPECS:
        return BUILTIN_SPECS[name_or_path]()
    if not os.path.exists(name_or_path):
        raise UsageError(
            f"unknown scene spec {name_or_path!r} "
            f"(builtins: {', '.join(sorted(BUILTIN_SPECS))})"
        )
    with open(name_or_path) as f:
        d = json.load(f)
    cameras = [
        _pinhole(d["width"], d["height"], d["fov_deg"], look_at(p["eye"], p["target"]))
        for p in d["camera_path"]
    ]
    actors = [Actor(**a) for a in d.get("actors", [])]
    keys = {
        k: d[k]
        for k in (
            "plane_z", "tex_mode", "tex_scale", "plane_c0", "plane_c1",
            "sky", "light", "ambient",
        )
        if k in d
    }
    return SceneSpec(
        name=d.get("name", os.path.basename(name_or_path)),
        width=d["width"],
        height=d["height"],
        n_frames=len(cameras),
        near=d["near"],
        far=d["far"],
        cameras=cameras,
        actors=actors,
        **keys,
    )


def _load_model(ckpt_path):
    """Rebuild a pipeline from a checkpoint's embedded config."""
    params, _, _, header = load_checkpoint(ckpt_path)
    cfg = TrainConfig(**header["config"])
    ad.set_dtype(cfg.precision)
    pipe = Pipeline(cfg.model(), np.random.default_rng(cfg.seed))
    restore_params(pipe.params(), params)
    return pipe, cfg, header


def _camera_from_file(path):
    with open(path) as f:
        d = json.load(f)
    return Camera(
        fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
        c2w=np.asarray(d["c2w"]), width=d["width"], height=d["height"],
    )


def _render_frames(pipe, cfg, frames, near, far, indices, layers=("composite",)):
    """Render dataset frames; yields (index, {layer: array})."""
    latent = pipe.compute_latent(clip_proxy(frames))
    denom = max(1, len(frames) - 1)
    for i in indices:
        prev = frames[max(i - 1, 0)].image
        yield i, render_image(
            pipe, latent, frames[i].camera, i / denom, near, far, cfg.n_p,
            prev_image=prev, layers=layers,
        )


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scene(args):
    spec = _load_spec(args.spec)
    frames = generate_scene(spec, seed=args.seed)
    write_dataset(frames, args.out, spec.near, spec.far, name=spec.name)
    print(f"wrote {len(frames)} frames ({spec.width}x{spec.height}) to {args.out}")
    return 0


def cmd_train(args):
    frames, near, far = read_dataset(args.data)
    cfg = parse_config(args.config) if args.config else TrainConfig()
    trainer = Trainer(frames, near, far, cfg, out_dir=args.out)
    if args.resume:
        header = trainer.load(args.resume)
        print(f"resumed from {args.resume} at step {header['step']}")
    t0 = time.time()
    try:
        summary = trainer.train()
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 1
    mins = (time.time() - t0) / 60.0
    if not summary:
        print("nothing to train (checkpoint already at the configured step count)")
        return 0
    print(
        f"trained {cfg.steps} steps in {mins:.1f} min; "
        f"L_rec {summary['first_rec']:.4g} -> {summary['last_rec']:.4g}, "
        f"train-batch PSNR {summary['last_psnr']:.2f} dB"
    )
    return 0


def cmd_render(args):
    pipe, cfg, _ = _load_model(args.ckpt)
    frames, near, far = read_dataset(args.data)
    layers = tuple(args.layers.split(","))
    for layer in layers:
        if layer not in LAYER_NAMES:
            raise UsageError(f"unknown layer {layer!r} (choose from {', '.join(LAYER_NAMES)})")
    i = args.frame
    if not 0 <= i < len(frames):
        raise UsageError(f"frame {i} out of range (dataset has {len(frames)} frames)")
    os.makedirs(args.out, exist_ok=True)
    if args.camera is not None and not args.camera.isdigit():
        cam = _camera_from_file(args.camera)
    else:
        cam = frames[int(args.camera) if args.camera else i].camera
    latent = pipe.compute_latent(clip_proxy(frames))
    denom = max(1, len(frames) - 1)
    out = render_image(
        pipe, latent, cam, i / denom, near, far, cfg.n_p,
        prev_image=frames[max(i - 1, 0)].image, layers=layers,
    )
    for layer, arr in out.items():
        base = os.path.join(args.out, f"frame{i:04d}_{layer}")
        write_pfm(base + ".pfm", arr)
        if arr.ndim == 3:
            write_png(base + ".png", np.clip(arr, 0.0, 1.0))
    print(f"wrote {len(out)} layer(s) to {args.out}")
    return 0


def cmd_eval(args):
    if bool(args.ckpt) == bool(args.images):
        raise UsageError("eval needs exactly one of --ckpt or --images")
    frames, near, far = read_dataset(args.data)
    t0 = time.time()
    if args.ckpt:
        pipe, cfg, _ = _load_model(args.ckpt)
        rendered = {
            i: out["composite"]
            for i, out in _render_frames(pipe, cfg, frames, near, far, range(len(frames)))
        }
        source = args.ckpt
    else:
        rendered = {}
        for f in frames:
            path = os.path.join(args.images, f"{f.index:04d}.pfm")
            if not os.path.exists(path):
                raise UsageError(f"{path}: missing rendered frame")
            rendered[f.index] = read_pfm(path)
        source = args.images
    rows = []
    for f in frames:
        rows.append((f.index, psnr(rendered[f.index], f.image), ssim(rendered[f.index], f.image)))
    mean_p = float(np.mean([r[1] for r in rows]))
    mean_s = float(np.mean([r[2] for r in rows]))
    with open(args.report, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["frame", "psnr", "ssim"])
        for i, p, s in rows:
            w.writerow([i, f"{p:.6g}", f"{s:.6g}"])
        w.writerow(["mean", f"{mean_p:.6g}", f"{mean_s:.6g}"])
    print(f"evaluated {len(rows)} frames from {source} in {time.time() - t0:.1f}s")
    print(f"mean PSNR {mean_p:.2f} dB, mean SSIM {mean_s:.4f} -> {args.report}")
    return 0


# cumulative switches reproducing the ablation ladder, in order
ABLATION_LADDER = {
    "base": dict(use_latent=False, use_occlusion=False, use_flow_losses=False, use_depth=False),
    "dt": dict(use_latent=True, use_occlusion=False, use_flow_losses=False, use_depth=False),
    "rw": dict(use_latent=True, use_occlusion=True, use_flow_losses=False, use_depth=False),
    "flow": dict(use_latent=True, use_occlusion=True, use_flow_losses=True, use_depth=False),
    "depth": dict(use_latent=True, use_occlusion=True, use_flow_losses=True, use_depth=True),
}


def run_ablation(frames, near, far, base_cfg, variants, out_dir=None):
    """Train each ladder variant from the same seed; returns variant -> dict."""
    results = {}
    for name in variants:
        if name not in ABLATION_LADDER:
            raise UsageError(
                f"unknown variant {name!r} (choose from {', '.join(ABLATION_LADDER)})"
            )
        cfg = dataclasses.replace(base_cfg, **ABLATION_LADDER[name])
        run_dir = os.path.join(out_dir, name) if out_dir else None
        trainer = Trainer(frames, near, far, cfg, out_dir=run_dir)
        trainer.train()
        psnrs, ssims = [], []
        for i, out in _render_frames(
            trainer.pipeline, cfg, frames, near, far, range(len(frames))
        ):
            psnrs.append(psnr(out["composite"], frames[i].image))
            ssims.append(ssim(out["composite"], frames[i].image))
        results[name] = {
            "psnr": float(np.mean(psnrs)),
            "ssim": float(np.mean(ssims)),
            "trainer": trainer,
        }
    return results


def cmd_ablate(args):
    frames, near, far = read_dataset(args.data)
    base_cfg = parse_config(args.config) if args.config else TrainConfig()
    variants = args.variants.split(",")
    t0 = time.time()
    results = run_ablation(frames, near, far, base_cfg, variants, out_dir=args.out)
    with open(args.report, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["variant", "mean_psnr", "mean_ssim"])
        for name in variants:
            w.writerow([name, f"{results[name]['psnr']:.6g}", f"{results[name]['ssim']:.6g}"])
    for name in variants:
        print(f"{name}: mean PSNR {results[name]['psnr']:.2f} dB, SSIM {results[name]['ssim']:.4f}")
    print(f"ablation ({len(variants)} variants) took {(time.time() - t0) / 60:.1f} min -> {args.report}")
    return 0


def cmd_check(args):
    suite = {"oracle": "quad"}.get(args.suite, args.suite)
    ok, lines = run_suite(suite)
    for line in lines:
        print(line)
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(
        prog="decompnerf",
        description="Dynamic-scene decomposition NeRF: train, render, evaluate.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="render a synthetic dataset with ground truth")
    g.add_argument("--spec", required=True, help="builtin name or JSON spec file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_scene)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--out", required=True, help="checkpoint/metrics directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render one frame from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True, help="dataset dir (cameras and bounds)")
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--camera", help="camera index or pose JSON (default: frame's camera)")
    r.add_argument("--out", required=True)
    r.add_argument("--layers", default="composite", help=",".join(LAYER_NAMES))
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM report against dataset frames")
    e.add_argument("--ckpt")
    e.add_argument("--images", help="directory of %%04d.pfm frames instead of a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="output CSV")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train the ablation ladder and report")
    a.add_argument("--data", required=True)
    a.add_argument("--config", help="shared training config")
    a.add_argument("--variants", default="base,dt,rw,flow,depth")
    a.add_argument("--report", required=True)
    a.add_argument("--out", help="directory for per-variant run artifacts")
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("check", help="run a self-verification suite")
    c.add_argument("--suite", required=True, choices=["grad", "quad", "oracle", "algebra", "all"])
    c.set_defaults(fn=cmd_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, DatasetError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
