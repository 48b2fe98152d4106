"""Occlusion-weight module and per-ray compositing.

An MLP over (embedded position, embedded direction, previous-frame color at
the ray's pixel) produces sigmoid weights per sample for the static and
dynamic quadratures, plus a pooled per-ray transmittance tee that blends the
two rendered colors. The transmittance loss polarizes tee toward {0, 1} and
pushes the per-sample weights toward 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nets import MLP, Linear
from .rays import encoding_dim, positional_encode

ENTROPY_EPS = 1e-6


@dataclass
class OcclusionWeights:
    omega_b: ad.Tensor  # (R, N_p) in [0, 1]
    omega_d: ad.Tensor  # (R, N_p) in [0, 1]
    tee: ad.Tensor  # (R,) in [0, 1]


class OcclusionModule:
    def __init__(self, rng, m_loc=10, m_dir=4, hidden=128, depth=4, tee_bias=0.0, omega_bias=0.0):
        self.m_loc = m_loc
        self.m_dir = m_dir
        n_l = encoding_dim(3, m_loc)
        n_d = encoding_dim(3, m_dir)
        self.n_l, self.n_d = n_l, n_d
        self.mlp = MLP(rng, n_l + n_d + 3, hidden, depth)
        self.omega_head = Linear(rng, hidden, 2, init="glorot", bias=omega_bias)
        self.tee_head = Linear(rng, hidden, 1, init="glorot", bias=tee_bias)

    def evaluate(self, points, dirs, prev_color):
        """points (R, P, 3), dirs (R, 3), prev_color (R, 3) -> OcclusionWeights."""
        points = np.asarray(points)
        r, p = points.shape[0], points.shape[1]
        emb_x = positional_encode(points, self.m_loc)
        emb_d = positional_encode(np.asarray(dirs), self.m_dir)
        prev = np.asarray(prev_color)
        per_sample = np.concatenate(
            [
                emb_x,
                np.broadcast_to(emb_d[:, None, :], (r, p, self.n_d)),
                np.broadcast_to(prev[:, None, :], (r, p, 3)),
            ],
            axis=-1,
        )
        h = self.mlp(ad.Tensor(per_sample.reshape(r * p, -1)))
        omega = ad.sigmoid(ad.reshape(self.omega_head(h), (r, p, 2)))
        pooled = ad.tmean(ad.reshape(h, (r, p, -1)), axis=1)  # (R, hidden)
        tee = ad.reshape(ad.sigmoid(self.tee_head(pooled)), (r,))
        return OcclusionWeights(omega_b=omega[:, :, 0], omega_d=omega[:, :, 1], tee=tee)

    def params(self, prefix="occlusion"):
        out = self.mlp.params(f"{prefix}.mlp")
        out.update(self.omega_head.params(f"{prefix}.omega_head"))
        out.update(self.tee_head.params(f"{prefix}.tee_head"))
        return out


def fixed_weights(num_rays, n_samples, tee_value=0.5):
    """The no-occlusion ablation: omega = 1 everywhere, tee fixed."""
    ones = ad.Tensor(np.ones((num_rays, n_samples)))
    return OcclusionWeights(
        omega_b=ones,
        omega_d=ad.Tensor(np.ones((num_rays, n_samples))),
        tee=ad.Tensor(np.full(num_rays, tee_value)),
    )


def composite_pixel(tee, static_quad, dynamic_quad):
    """Blend the omega-weighted quadratures: tee*static + (1-tee)*dynamic.

    tee: (R,); quads: (R, 3). Also accepts scalars for the algebraic tests.
    """
    tee = ad.as_tensor(tee)
    static_quad = ad.as_tensor(static_quad)
    dynamic_quad = ad.as_tensor(dynamic_quad)
    if tee.ndim == static_quad.ndim - 1:
        tee = ad.reshape(tee, tee.shape + (1,))
    return tee * static_quad + (1.0 - tee) * dynamic_quad


def transmittance_loss(weights: OcclusionWeights, eps=ENTROPY_EPS, literal=False):
    """Polarization term on tee plus L1 pull of every omega toward 1.

    The default polarization is -t log(t + eps): zero at both endpoints, but
    asymmetric — for t > 1/e its gradient pushes t toward 1, so rays default
    to the static branch and only flip to dynamic when reconstruction insists.
    ``literal=True`` switches to -t log(-t + eps), which is non-finite for
    t > eps and kept solely for comparison.
    """
    t = weights.tee
    if literal:
        polar = -t * ad.log(-t, eps=eps)
    else:
        polar = -t * ad.log(t, eps=eps)
    l1 = ad.tsum(ad.absolute(1.0 - weights.omega_b), axis=1) + ad.tsum(
        ad.absolute(1.0 - weights.omega_d), axis=1
    )
    return ad.tmean(polar) + ad.tmean(l1)
