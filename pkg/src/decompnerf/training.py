"""Losses, the Adam optimizer, configuration parsing, and the two-phase
training loop.

Phase 1 (warm-up) supervises the dynamic field's flow heads against the
dataset's ground-truth scene flow while the reconstruction loss shapes both
fields. Phase 2 switches to the full six-term objective: reconstruction,
latent-distribution regularization, depth, cross-frame consistency, flow
regularization, and the transmittance/weight polarization term.
"""

from __future__ import annotations

import csv
import dataclasses
import os
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import autodiff as ad
from . import render as rd
from .dataio import save_checkpoint, load_checkpoint, restore_params
from .latent import distribution_loss
from .metrics import psnr
from .occlusion import ENTROPY_EPS, composite_pixel, transmittance_loss
from .pipeline import ModelConfig, Pipeline, clip_proxy
from .rays import make_batch, pixel_dirs, project


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss terms


@dataclass
class LossWeights:
    rec: float = 1.0
    dist: float = 5e-1
    depth: float = 3e-2
    cons: float = 3e-2
    flow: float = 1e-2
    w: float = 5e-1

    def __post_init__(self):
        for f in dc_fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


def reconstruction_loss(pred, target):
    """Mean over rays of the squared L2 color error. pred: (R, 3) Tensor."""
    err = pred - ad.Tensor(np.asarray(target))
    return ad.tmean(ad.tsum(err * err, axis=1))


def depth_loss(pred, target):
    """Mean squared error between rendered and reference ray depth."""
    err = pred - ad.Tensor(np.asarray(target))
    return ad.tmean(err * err)


def flow_supervision(flow_fw, flow_bw, gt_fw, gt_bw):
    """Warm-up loss: squared error of every sample's flow against the
    pixel's ground-truth 3D flow. flows: (R, P, 3) Tensors; gt: (R, 3)."""
    r, p = flow_fw.shape[0], flow_fw.shape[1]
    tf = ad.Tensor(np.broadcast_to(np.asarray(gt_fw)[:, None, :], (r, p, 3)).copy())
    tb = ad.Tensor(np.broadcast_to(np.asarray(gt_bw)[:, None, :], (r, p, 3)).copy())
    ef = flow_fw - tf
    eb = flow_bw - tb
    return ad.tmean(ad.tsum(ef * ef, axis=2) + ad.tsum(eb * eb, axis=2))


def motion_mask(batch, cameras, weights_d, flow_fw, flow_bw, tau=0.5):
    """Boolean per-ray mask of likely-dynamic rays.

    The dynamic quadrature weights average each ray's sample flow and depth;
    the expected surface point is projected through the ray's camera with and
    without the flow displacement, and rays whose pixel displacement exceeds
    ``tau`` (in pixels, either direction) are marked dynamic. All inputs are
    plain arrays; the mask is a detached training signal.
    """
    w = np.asarray(weights_d, dtype=np.float64)
    norm = w.sum(axis=1) + 1e-8
    depth = (w * batch.depths).sum(axis=1) / norm
    f_fw = (w[:, :, None] * np.asarray(flow_fw)).sum(axis=1) / norm[:, None]
    f_bw = (w[:, :, None] * np.asarray(flow_bw)).sum(axis=1) / norm[:, None]
    pts = batch.origins + depth[:, None] * batch.dirs
    disp = np.zeros(batch.num_rays)
    frames = batch.frames if batch.frames is not None else np.zeros(batch.num_rays, dtype=np.int64)
    for fi in np.unique(frames):
        sel = frames == fi
        cam = cameras[int(fi)]
        base = project(cam, pts[sel])
        d_fw = np.linalg.norm(project(cam, pts[sel] + f_fw[sel]) - base, axis=-1)
        d_bw = np.linalg.norm(project(cam, pts[sel] + f_bw[sel]) - base, axis=-1)
        disp[sel] = np.maximum(d_fw, d_bw)
    return disp > tau


def consistency_loss(rendered, targets):
    """Mean squared L2 color error of flow-warped re-renders.

    rendered: list of (R_k, 3) Tensors; targets: matching arrays. An empty
    list (no dynamic rays in the batch) contributes zero.
    """
    if not rendered:
        return ad.Tensor(np.zeros(()))
    parts = [
        ad.tsum((r - ad.Tensor(np.asarray(t))) ** 2, axis=1)
        for r, t in zip(rendered, targets)
    ]
    cat = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    return ad.tmean(cat)


def flow_regularization(cycle_fw, cycle_bw_next, flow_fw, flow_bw, n_frames):
    """Forward/backward cycle consistency plus an L1 magnitude prior.

    cycle_fw / cycle_bw_next: (R_v, P, 3) Tensors evaluated at the same
    points one frame apart (None when no ray in the batch has a successor).
    flow_fw / flow_bw: the full-batch flows for the magnitude term, which is
    scaled by 1/(n_frames - 1).
    """
    l1 = ad.tmean(
        ad.tsum(ad.absolute(flow_fw), axis=2) + ad.tsum(ad.absolute(flow_bw), axis=2)
    ) / max(1, n_frames - 1)
    if cycle_fw is None:
        return l1
    diff = cycle_fw - cycle_bw_next
    return ad.tmean(ad.tsum(diff * diff, axis=2)) + l1


def overall_loss(terms, weights: LossWeights):
    """Weighted sum of the six loss terms (dict keyed rec/dist/depth/cons/flow/w)."""
    total = None
    for f in dc_fields(weights):
        lam = getattr(weights, f.name)
        if f.name not in terms:
            raise KeyError(f"missing loss term {f.name!r}")
        piece = terms[f.name] * lam
        total = piece if total is None else total + piece
    return total


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.values = p.values - self.lr * (self.m[k] / c1) / (
                np.sqrt(self.v[k] / c2) + self.eps
            )

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    resolution: int = 0  # target image height (0: native); exact block-mean downsample
    steps: int = 5000
    warmup_steps: int = 400
    n_rand: int = 256
    n_p: int = 32
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "float32"
    lambda_rec: float = 1.0
    lambda_dist: float = 5e-1
    lambda_depth: float = 3e-2
    lambda_cons: float = 3e-2
    lambda_flow: float = 1e-2
    lambda_w: float = 5e-1
    tau: float = 0.5  # motion-mask pixel threshold
    flow_rays: int = 64  # per-step ray cap for the flow-cycle term (0: all)
    cons_rays: int = 64  # per-step ray cap for the consistency term (0: all)
    entropy_eps: float = ENTROPY_EPS
    literal_entropy: bool = False
    warped_cycle: bool = False  # evaluate the cycle at flow-displaced points
    use_latent: bool = True  # distribution-driven background branch (DT)
    use_occlusion: bool = True  # learned ray weights (RW)
    use_flow_losses: bool = True  # consistency + flow regularization
    use_depth: bool = True
    latent_dim: int = 64
    n_s: int = 64
    n_tokens: int = 8
    m_loc: int = 10
    m_dir: int = 4
    m_time: int = 4
    hidden: int = 128
    depth: int = 6
    color_hidden: int = 64
    occ_hidden: int = 64
    occ_depth: int = 3
    tee_bias: float = 1.5
    omega_bias: float = 2.0
    fixed_tee: float = 0.5
    checkpoint_every: int = 0  # 0: only at the end
    log_every: int = 10

    def weights(self):
        return LossWeights(
            rec=self.lambda_rec,
            dist=self.lambda_dist if self.use_latent else 0.0,
            depth=self.lambda_depth if self.use_depth else 0.0,
            cons=self.lambda_cons if self.use_flow_losses else 0.0,
            flow=self.lambda_flow if self.use_flow_losses else 0.0,
            w=self.lambda_w if self.use_occlusion else 0.0,
        )

    def model(self):
        return ModelConfig(
            latent_dim=self.latent_dim,
            n_s=self.n_s,
            n_tokens=self.n_tokens,
            m_loc=self.m_loc,
            m_dir=self.m_dir,
            m_time=self.m_time,
            hidden=self.hidden,
            depth=self.depth,
            color_hidden=self.color_hidden,
            occ_hidden=self.occ_hidden,
            occ_depth=self.occ_depth,
            tee_bias=self.tee_bias,
            omega_bias=self.omega_bias,
            use_latent=self.use_latent,
            use_occlusion=self.use_occlusion,
            fixed_tee=self.fixed_tee,
        )


def _coerce(text, typ):
    if typ is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return typ(text)


def parse_config(source, overrides=None):
    """Read 'key = value' lines ('#' comments) into a TrainConfig.

    ``source`` is a path or an already-open iterable of lines. Unknown keys
    are an error; ``overrides`` (a dict) is applied last.
    """
    types = {f.name: f.type for f in dc_fields(TrainConfig)}
    # dataclass field types may be strings under from __future__ annotations
    real = {f.name: type(getattr(TrainConfig(), f.name)) for f in dc_fields(TrainConfig)}
    values = {}
    if isinstance(source, (str, os.PathLike)):
        with open(source) as f:
            lines = f.readlines()
    else:
        lines = list(source)
    for ln, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected 'key = value', got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key == "lambdas":  # shorthand: rec, dist, depth, cons, flow, w
            parts = [float(v) for v in val.split(",")]
            if len(parts) != 6:
                raise ValueError(f"config line {ln}: lambdas needs 6 values, got {len(parts)}")
            for name, v in zip(("rec", "dist", "depth", "cons", "flow", "w"), parts):
                values[f"lambda_{name}"] = v
            continue
        if key not in types:
            raise ValueError(f"config line {ln}: unknown key {key!r}")
        values[key] = _coerce(val, real[key])
    if overrides:
        for k, v in overrides.items():
            if k not in types:
                raise ValueError(f"unknown config key {k!r}")
            values[k] = _coerce(v, real[k]) if isinstance(v, str) else v
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# trainer


def _block_mean(arr, f):
    h, w = arr.shape[:2]
    shaped = arr.reshape(h // f, f, w // f, f, *arr.shape[2:])
    return shaped.mean(axis=(1, 3))


def downsample_frames(frames, resolution):
    """Exact block-mean downsample of a dataset to the given image height.

    With intrinsics divided by the same factor, the new pixel centers map to
    the old block centers exactly, so the rescaled cameras stay consistent.
    """
    from .scenegen import SceneFrame
    from .rays import Camera

    h, w = frames[0].image.shape[:2]
    if resolution <= 0 or resolution == h:
        return frames
    if h % resolution != 0:
        raise ValueError(f"resolution {resolution} does not divide image height {h}")
    f = h // resolution
    if w % f != 0:
        raise ValueError(f"downsample factor {f} does not divide image width {w}")
    out = []
    for fr in frames:
        c = fr.camera
        cam = Camera(
            fx=c.fx / f, fy=c.fy / f, cx=c.cx / f, cy=c.cy / f,
            c2w=c.c2w, width=w // f, height=h // f,
        )
        out.append(
            SceneFrame(
                index=fr.index,
                camera=cam,
                image=_block_mean(fr.image, f),
                depth=_block_mean(fr.depth, f),
                flow_fw=_block_mean(fr.flow_fw, f),
                flow_bw=_block_mean(fr.flow_bw, f),
                dyn_mask=_block_mean(fr.dyn_mask.astype(np.float64), f) > 0,
            )
        )
    return out


class Trainer:
    def __init__(self, frames, near, far, cfg: TrainConfig, out_dir=None):
        ad.set_dtype(cfg.precision)
        self.cfg = cfg
        self.near = near
        self.far = far
        self.out_dir = out_dir
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

        if cfg.resolution:
            frames = downsample_frames(frames, cfg.resolution)
        self.frames = frames
        self.n_frames = len(frames)
        h, w = frames[0].image.shape[:2]
        self.h, self.w = h, w
        self.cameras = [f.camera for f in frames]
        self.images = np.stack([f.image.reshape(-1, 3) for f in frames])
        self.depths_gt = np.stack([f.depth.reshape(-1) for f in frames])
        self.flow_fw_gt = np.stack([f.flow_fw.reshape(-1, 3) for f in frames])
        self.flow_bw_gt = np.stack([f.flow_bw.reshape(-1, 3) for f in frames])
        px, py = np.meshgrid(np.arange(w), np.arange(h))
        self.dirs = np.stack(
            [pixel_dirs(f.camera, px.ravel(), py.ravel()) for f in frames]
        )
        self.centers = np.stack([f.camera.center for f in frames])
        self.proxy = clip_proxy(frames)

        self.pipeline = Pipeline(cfg.model(), np.random.default_rng(cfg.seed))
        self.params = self.pipeline.params()
        self.opt = Adam(
            self.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps
        )
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.start_step = 0
        self.history = []
        self._csv = None

    # -- batching ----------------------------------------------------------

    def sample_batch(self):
        cfg = self.cfg
        fi = self.rng.integers(0, self.n_frames, cfg.n_rand)
        pi = self.rng.integers(0, self.h * self.w, cfg.n_rand)
        dirs = self.dirs[fi, pi]
        batch = make_batch(
            self.centers[fi],
            dirs,
            self.near,
            self.far,
            cfg.n_p,
            rng=self.rng,
            mode="stratified",
            pixels=np.stack([pi % self.w, pi // self.w], axis=1),
            frames=fi,
        )
        target = self.images[fi, pi]
        prev = self.images[np.maximum(fi - 1, 0), pi]
        denom = max(1, self.n_frames - 1)
        times = fi.astype(np.float64) / denom
        return batch, fi, pi, times, target, prev

    # -- loss assembly -----------------------------------------------------

    def _consistency(self, batch, out, fi, pi, target, times, mask=None):
        """Re-render the dynamic field at flow-displaced points for masked
        rays and compare the warped composite against the current frame.

        ``mask`` overrides the motion mask (the gradient checks pass a fixed
        all-ones mask so the loss surface stays smooth under perturbation).
        """
        cfg = self.cfg
        denom = max(1, self.n_frames - 1)
        if mask is None:
            mask = motion_mask(
                batch,
                self.cameras,
                out["quad_d"].weights.values,
                out["dynamic"].flow_fw.values,
                out["dynamic"].flow_bw.values,
                tau=cfg.tau,
            )
        idx_m = np.nonzero(mask)[0]
        if cfg.cons_rays and idx_m.size > cfg.cons_rays:
            idx_m = self.rng.choice(idx_m, size=cfg.cons_rays, replace=False)
        rendered, targets = [], []
        pts = batch.points()
        for flow, shift, valid in (
            (out["dynamic"].flow_bw, -1, fi > 0),
            (out["dynamic"].flow_fw, +1, fi < self.n_frames - 1),
        ):
            sel = idx_m[valid[idx_m]]
            if sel.size == 0:
                continue
            warped = ad.add(ad.Tensor(pts[sel]), ad.take(flow, sel))
            dyn = self.pipeline.dynamic.evaluate(
                warped, batch.dirs[sel], (fi[sel] + shift) / denom
            )
            quad = rd.quadrature(dyn.sigma, batch.deltas[sel])
            cdw = rd.render_weighted_color(
                quad, dyn.color, ad.take(out["occ"].omega_d, sel)
            )
            comp = composite_pixel(
                ad.take(out["occ"].tee, sel), ad.take(out["color_b"], sel), cdw
            )
            rendered.append(comp)
            targets.append(target[sel])
        return consistency_loss(rendered, targets), mask

    def _flow_reg(self, batch, out, fi, times):
        cfg = self.cfg
        denom = max(1, self.n_frames - 1)
        valid = np.nonzero(fi < self.n_frames - 1)[0]
        if cfg.flow_rays and valid.size > cfg.flow_rays:
            valid = self.rng.choice(valid, size=cfg.flow_rays, replace=False)
        cycle_fw = cycle_bw = None
        if valid.size:
            fw_sub = ad.take(out["dynamic"].flow_fw, valid)
            pts = batch.points()[valid]
            query = ad.add(ad.Tensor(pts), fw_sub) if cfg.warped_cycle else pts
            nxt = self.pipeline.dynamic.evaluate(
                query, batch.dirs[valid], (fi[valid] + 1) / denom, flow_only=True
            )
            cycle_fw, cycle_bw = fw_sub, nxt.flow_bw
        return flow_regularization(
            cycle_fw,
            cycle_bw,
            out["dynamic"].flow_fw,
            out["dynamic"].flow_bw,
            self.n_frames,
        )

    def compute_losses(self, batch, out, latent, fi, pi, times, target, warmup):
        cfg = self.cfg
        zero = ad.Tensor(np.zeros(()))
        terms = {"rec": reconstruction_loss(out["composite"], target)}
        if warmup:
            gt_fw = self.flow_fw_gt[fi, pi]
            gt_bw = self.flow_bw_gt[fi, pi]
            terms["flow_sup"] = flow_supervision(
                out["dynamic"].flow_fw, out["dynamic"].flow_bw, gt_fw, gt_bw
            )
            total = terms["rec"] + terms["flow_sup"]
            return total, terms
        terms["dist"] = distribution_loss(latent) if cfg.use_latent else zero
        terms["depth"] = (
            depth_loss(out["depth"], self.depths_gt[fi, pi]) if cfg.use_depth else zero
        )
        if cfg.use_flow_losses:
            terms["cons"], _ = self._consistency(batch, out, fi, pi, target, times)
            terms["flow"] = self._flow_reg(batch, out, fi, times)
        else:
            terms["cons"] = zero
            terms["flow"] = zero
        terms["w"] = (
            transmittance_loss(out["occ"], eps=cfg.entropy_eps, literal=cfg.literal_entropy)
            if cfg.use_occlusion
            else zero
        )
        return overall_loss(terms, cfg.weights()), terms

    # -- loop --------------------------------------------------------------

    def step(self, i):
        cfg = self.cfg
        # key the stream on the step index so a resumed run replays the same
        # batches as an uninterrupted one
        self.rng = np.random.default_rng((cfg.seed + 1, i))
        batch, fi, pi, times, target, prev = self.sample_batch()
        latent = self.pipeline.compute_latent(self.proxy)
        out = self.pipeline.render_ray_batch(batch, times, prev, latent)
        warmup = i < cfg.warmup_steps
        total, terms = self.compute_losses(batch, out, latent, fi, pi, times, target, warmup)
        if not np.isfinite(total.values):
            self._dump_batch(i, fi, pi, batch)
            raise TrainingAborted(f"non-finite loss at step {i}")
        self.opt.zero_grad()
        total.backward()
        if warmup:
            # hold the occlusion module at its static-favored initialization
            # until both fields have fitted the scene
            for name, p in self.params.items():
                if name.startswith("occlusion"):
                    p.grad = None
        self.opt.step()
        row = {
            "step": i,
            "phase": "warmup" if warmup else "full",
            "total": float(total.values),
            "psnr": psnr(out["composite"].values, target),
        }
        for name in ("rec", "dist", "depth", "cons", "flow", "w", "flow_sup"):
            row[name] = float(terms[name].values) if name in terms else float("nan")
        return row

    def _dump_batch(self, i, fi, pi, batch):
        if not self.out_dir:
            return
        np.savez(
            os.path.join(self.out_dir, f"abort_step{i}.npz"),
            frames=fi,
            pixels=pi,
            depths=batch.depths,
        )

    def train(self, on_step=None):
        cfg = self.cfg
        writer = None
        csv_file = None
        if self.out_dir:
            path = os.path.join(self.out_dir, "metrics.csv")
            new = self.start_step == 0 or not os.path.exists(path)
            csv_file = open(path, "w" if new else "a", newline="")
            writer = csv.writer(csv_file)
            if new:
                writer.writerow(
                    ["step", "phase", "rec", "dist", "depth", "cons", "flow", "w",
                     "flow_sup", "total", "psnr"]
                )
        try:
            for i in range(self.start_step, cfg.steps):
                row = self.step(i)
                self.history.append(row)
                if writer and (i % cfg.log_every == 0 or i == cfg.steps - 1):
                    writer.writerow(
                        [row["step"], row["phase"]]
                        + [f"{row[k]:.6g}" for k in
                           ("rec", "dist", "depth", "cons", "flow", "w", "flow_sup",
                            "total", "psnr")]
                    )
                    csv_file.flush()
                if (
                    self.out_dir
                    and cfg.checkpoint_every
                    and (i + 1) % cfg.checkpoint_every == 0
                ):
                    self.save(os.path.join(self.out_dir, f"ckpt_{i + 1:06d}.npz"), i + 1)
                if on_step:
                    on_step(row)
        finally:
            if csv_file:
                csv_file.close()
        if self.out_dir:
            self.save(os.path.join(self.out_dir, "checkpoint.npz"), cfg.steps)
        return self.summary()

    def summary(self):
        full = [r for r in self.history if r["phase"] == "full"]
        rows = full or self.history
        if not rows:
            return {}
        tail = rows[-min(50, len(rows)):]
        return {
            "first_rec": self.history[0]["rec"],
            "last_rec": float(np.mean([r["rec"] for r in tail])),
            "last_psnr": float(np.mean([r["psnr"] for r in tail])),
            "steps": self.history[-1]["step"] + 1,
        }

    # -- persistence -------------------------------------------------------

    def save(self, path, step):
        meta = {
            "step": int(step),
            "adam_t": int(self.opt.t),
            "config": dataclasses.asdict(self.cfg),
        }
        save_checkpoint(
            path,
            {k: p.values for k, p in self.params.items()},
            self.opt.m,
            self.opt.v,
            meta,
        )

    def load(self, path):
        saved, m, v, header = load_checkpoint(path)
        restore_params(self.params, saved)
        for k in self.opt.m:
            if k in m:
                self.opt.m[k] = m[k].astype(self.opt.m[k].dtype)
                self.opt.v[k] = v[k].astype(self.opt.v[k].dtype)
        self.opt.t = int(header.get("adam_t", 0))
        self.start_step = int(header.get("step", 0))
        return header
