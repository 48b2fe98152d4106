"""Model assembly: both fields, the occlusion module, the scene-latent
encoder, per-batch rendering, and tiled full-image rendering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import render as rd
from .dynamic_field import DynamicField
from .latent import ENCODER_SIZE, DistributionEncoder, SceneLatent, background_proxy
from .occlusion import OcclusionModule, composite_pixel, fixed_weights
from .rays import make_batch, pixel_dirs
from .static_field import StaticField


@dataclass
class ModelConfig:
    latent_dim: int = 64
    n_s: int = 64
    n_tokens: int = 8
    m_loc: int = 10
    m_dir: int = 4
    m_time: int = 4
    hidden: int = 256
    depth: int = 8
    color_hidden: int = 128
    occ_hidden: int = 128
    occ_depth: int = 4
    tee_bias: float = 1.5  # start static-dominant so the background fits first
    omega_bias: float = 2.0  # start omegas near 1 (the L1 pull's optimum)
    use_latent: bool = True  # the distribution-encoder branch (DT)
    use_occlusion: bool = True  # the learned ray-weight module (RW)
    fixed_tee: float = 0.5  # used when use_occlusion is off


class Pipeline:
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.static = StaticField(
            rng,
            latent_dim=cfg.latent_dim,
            n_s=cfg.n_s,
            n_tokens=cfg.n_tokens,
            m_loc=cfg.m_loc,
            m_dir=cfg.m_dir,
            hidden=cfg.hidden,
            depth=cfg.depth,
            color_hidden=cfg.color_hidden,
            use_latent=cfg.use_latent,
        )
        self.dynamic = DynamicField(
            rng,
            m_loc=cfg.m_loc,
            m_dir=cfg.m_dir,
            m_time=cfg.m_time,
            hidden=cfg.hidden,
            depth=cfg.depth,
            color_hidden=cfg.color_hidden,
        )
        self.encoder = (
            DistributionEncoder(rng, latent_dim=cfg.latent_dim) if cfg.use_latent else None
        )
        self.occlusion = (
            OcclusionModule(
                rng,
                m_loc=cfg.m_loc,
                m_dir=cfg.m_dir,
                hidden=cfg.occ_hidden,
                depth=cfg.occ_depth,
                tee_bias=cfg.tee_bias,
                omega_bias=cfg.omega_bias,
            )
            if cfg.use_occlusion
            else None
        )

    def params(self):
        out = self.static.params("static")
        out.update(self.dynamic.params("dynamic"))
        if self.encoder is not None:
            out.update(self.encoder.params("encoder"))
        if self.occlusion is not None:
            out.update(self.occlusion.params("occlusion"))
        return out

    def compute_latent(self, proxy):
        """Scene latent from the proxy image; a zero constant when DT is off."""
        if self.encoder is None:
            zero = ad.Tensor(np.zeros(self.cfg.latent_dim))
            return SceneLatent(mu=zero, z=zero, dim=self.cfg.latent_dim)
        return self.encoder.encode(proxy)

    def occlusion_weights(self, points, dirs, prev_color):
        if self.occlusion is None:
            r, p = points.shape[0], points.shape[1]
            return fixed_weights(r, p, tee_value=self.cfg.fixed_tee)
        return self.occlusion.evaluate(points, dirs, prev_color)

    def render_ray_batch(self, batch, times, prev_color, latent):
        """Full forward pass for a ray batch.

        times: (R,) normalized time per ray; prev_color: (R, 3) conditioning
        color for the occlusion module. Returns every intermediate needed by
        the losses.
        """
        pts = batch.points()
        static_out = self.static.evaluate(pts, batch.dirs, latent)
        dyn_out = self.dynamic.evaluate(pts, batch.dirs, times)
        weights = self.occlusion_weights(pts, batch.dirs, prev_color)
        quad_b = rd.quadrature(static_out.sigma, batch.deltas)
        quad_d = rd.quadrature(dyn_out.sigma, batch.deltas)
        cb = rd.render_weighted_color(quad_b, static_out.color, weights.omega_b)
        cd = rd.render_weighted_color(quad_d, dyn_out.color, weights.omega_d)
        comp = composite_pixel(weights.tee, cb, cd)
        w_comp = rd.composite_sample_weights(
            weights.tee, weights.omega_b, weights.omega_d, quad_b, quad_d
        )
        depth_hat = rd.render_depth(w_comp, batch.depths)
        return {
            "points": pts,
            "static": static_out,
            "dynamic": dyn_out,
            "occ": weights,
            "quad_b": quad_b,
            "quad_d": quad_d,
            "color_b": cb,
            "color_d": cd,
            "composite": comp,
            "depth": depth_hat,
        }


LAYER_NAMES = ("composite", "static", "dynamic", "depth", "tee")


def render_image(
    pipeline: Pipeline,
    latent,
    camera,
    time_norm,
    near,
    far,
    n_p,
    prev_image=None,
    tile_size=1024,
    layers=LAYER_NAMES,
):
    """Tiled full-frame render; deterministic (midpoint depth samples).

    ``prev_image`` conditions the occlusion module (the previous frame at the
    same pixel grid); when None the occlusion input color is zero. The
    'static'/'dynamic' layers are the plain per-field renders (no occlusion
    weighting); 'composite' applies the learned blend.
    """
    h, w = camera.height, camera.width
    px, py = np.meshgrid(np.arange(w), np.arange(h))
    px, py = px.ravel(), py.ravel()
    dirs_all = pixel_dirs(camera, px, py)
    n = px.size
    out = {name: [] for name in layers}
    with ad.no_grad():
        for lo in range(0, n, tile_size):
            hi = min(lo + tile_size, n)
            dirs = dirs_all[lo:hi]
            origins = np.broadcast_to(camera.center, dirs.shape)
            batch = make_batch(origins, dirs, near, far, n_p, mode="midpoint")
            pts = batch.points()
            times = np.full(hi - lo, time_norm)
            if prev_image is not None:
                prev = prev_image[py[lo:hi], px[lo:hi]]
            else:
                prev = np.zeros((hi - lo, 3))
            static_out = pipeline.static.evaluate(pts, dirs, latent)
            dyn_out = pipeline.dynamic.evaluate(pts, dirs, times)
            weights = pipeline.occlusion_weights(pts, dirs, prev)
            quad_b = rd.quadrature(static_out.sigma, batch.deltas)
            quad_d = rd.quadrature(dyn_out.sigma, batch.deltas)
            if "composite" in layers or "depth" in layers:
                cb = rd.render_weighted_color(quad_b, static_out.color, weights.omega_b)
                cd = rd.render_weighted_color(quad_d, dyn_out.color, weights.omega_d)
            if "composite" in layers:
                out["composite"].append(
                    composite_pixel(weights.tee, cb, cd).values
                )
            if "static" in layers:
                out["static"].append(
                    rd.render_weighted_color(quad_b, static_out.color).values
                )
            if "dynamic" in layers:
                out["dynamic"].append(
                    rd.render_weighted_color(quad_d, dyn_out.color).values
                )
            if "depth" in layers:
                w_comp = rd.composite_sample_weights(
                    weights.tee, weights.omega_b, weights.omega_d, quad_b, quad_d
                )
                out["depth"].append(rd.render_depth(w_comp, batch.depths).values)
            if "tee" in layers:
                out["tee"].append(weights.tee.values)
    result = {}
    for name in layers:
        stacked = np.concatenate(out[name], axis=0)
        shape = (h, w) if stacked.ndim == 1 else (h, w, stacked.shape[-1])
        result[name] = stacked.reshape(shape)
    return result


def clip_proxy(frames, size=ENCODER_SIZE):
    return background_proxy([f.image for f in frames], size=size)
