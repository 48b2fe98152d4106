"""Latent-conditioned static background field.

Embedded sample locations are pooled along each ray, attended against the
scene latent (both reshaped into tokens so the softmax ranges over more than
one key), and the attended feature is broadcast back to every sample as a
residual on the raw embedding. Density depends only on position and latent;
color additionally sees the view direction through the same attention
pattern.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nets import MLP, Linear
from .rays import encoding_dim, positional_encode


@dataclass
class StaticFieldOutput:
    sigma: ad.Tensor  # (R, N_p), >= 0
    color: ad.Tensor  # (R, N_p, 3), in [0, 1]


def pool_over_ray(features, axis=1):
    """Average pooling over the sample axis of per-ray features."""
    return ad.tmean(features, axis=axis)


def scaled_dot_product_attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v with token dim last.

    q: (..., T_q, d); k, v: (T_k, d) shared across the batch.
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ad.ShapeError(f"attention dim mismatch: {q.shape} vs {k.shape}")
    scores = (q @ ad.transpose(k)) * (1.0 / np.sqrt(d))
    return ad.softmax(scores, axis=-1) @ v


class StaticField:
    def __init__(
        self,
        rng,
        latent_dim=64,
        n_s=64,
        n_tokens=8,
        m_loc=10,
        m_dir=4,
        hidden=256,
        depth=8,
        color_hidden=128,
        use_latent=True,
    ):
        if n_s % n_tokens != 0:
            raise ValueError("n_s must be divisible by n_tokens")
        self.n_s = n_s
        self.n_tokens = n_tokens
        self.d_token = n_s // n_tokens
        self.m_loc = m_loc
        self.m_dir = m_dir
        self.use_latent = use_latent
        n_l = encoding_dim(3, m_loc)
        n_d = encoding_dim(3, m_dir)
        self.n_l = n_l
        self.n_d = n_d

        self.down_loc = Linear(rng, n_l, n_s)
        self.down_dir = Linear(rng, n_d + n_l, n_s)
        self.down_z = Linear(rng, latent_dim, n_s)
        self.up_loc = Linear(rng, n_s, n_l)
        self.up_dir = Linear(rng, n_s, n_d)

        self.trunk = MLP(rng, n_l, hidden, depth)  # headless; sigma/feat heads below
        self.sigma_head = Linear(rng, hidden, 1)
        self.feat_head = Linear(rng, hidden, color_hidden)
        self.color_l1 = Linear(rng, color_hidden + n_d, color_hidden)
        self.color_out = Linear(rng, color_hidden, 3, init="glorot")

    def _tokens(self, flat):
        """(..., n_s) -> (..., n_tokens, d_token)."""
        shape = flat.shape[:-1] + (self.n_tokens, self.d_token)
        return ad.reshape(flat, shape)

    def latent_tokens(self, z):
        return self._tokens(self.down_z(z))

    def attention(self, query_pooled, z):
        """Per-ray attention of pooled query tokens over latent tokens.

        query_pooled: (R, n_s); returns (R, n_s).
        """
        kv = self.latent_tokens(z)
        q = self._tokens(query_pooled)
        att = scaled_dot_product_attention(q, kv, kv)
        return ad.reshape(att, query_pooled.shape)

    def evaluate(self, points, dirs, latent):
        """points: (R, P, 3) array or Tensor; dirs: (R, 3); latent: SceneLatent."""
        emb_x = positional_encode(
            points if isinstance(points, ad.Tensor) else ad.Tensor(points), self.m_loc
        )
        r, p = emb_x.shape[0], emb_x.shape[1]
        emb_d = positional_encode(ad.Tensor(np.asarray(dirs)), self.m_dir)  # (R, n_d)

        if self.use_latent:
            q_loc = pool_over_ray(self.down_loc(emb_x))  # (R, n_s)
            att_loc = self.up_loc(self.attention(q_loc, latent.z))  # (R, n_l)
            c_loc = emb_x + ad.reshape(att_loc, (r, 1, self.n_l))
        else:
            c_loc = emb_x

        h = self.trunk.hidden(ad.reshape(c_loc, (r * p, self.n_l)))
        sigma = ad.softplus(self.sigma_head(h))
        sigma = ad.reshape(sigma, (r, p))

        if self.use_latent:
            emb_d_b = ad.broadcast_to(ad.reshape(emb_d, (r, 1, self.n_d)), (r, p, self.n_d))
            u = ad.concat([emb_d_b, c_loc], axis=-1)
            q_dir = pool_over_ray(self.down_dir(u))
            att_dir = self.up_dir(self.attention(q_dir, latent.z))
            c_dir = emb_d + att_dir  # (R, n_d)
        else:
            c_dir = emb_d

        feat = self.feat_head(h)  # (R*P, color_hidden)
        c_dir_b = ad.broadcast_to(
            ad.reshape(c_dir, (r, 1, self.n_d)), (r, p, self.n_d)
        )
        c_dir_flat = ad.reshape(c_dir_b, (r * p, self.n_d))
        x = ad.relu(self.color_l1(ad.concat([feat, c_dir_flat], axis=-1)))
        color = ad.sigmoid(self.color_out(x))
        return StaticFieldOutput(sigma=sigma, color=ad.reshape(color, (r, p, 3)))

    def params(self, prefix="static"):
        out = {}
        for name in (
            "down_loc",
            "down_dir",
            "down_z",
            "up_loc",
            "up_dir",
            "sigma_head",
            "feat_head",
            "color_l1",
            "color_out",
        ):
            out.update(getattr(self, name).params(f"{prefix}.{name}"))
        out.update(self.trunk.params(f"{prefix}.trunk"))
        return out
