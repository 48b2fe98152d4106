"""Time-conditioned dynamic field with forward/backward scene-flow heads.

Input is (position, view direction, normalized time index); output per sample
is density, color, and two 3D flow vectors pointing to the neighboring time
steps. The flow head is zero-initialized so early warm-up losses start from
an exactly static motion estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nets import MLP, Linear
from .rays import encoding_dim, positional_encode


@dataclass
class DynamicFieldOutput:
    sigma: ad.Tensor  # (R, N_p)
    color: ad.Tensor  # (R, N_p, 3)
    flow_fw: ad.Tensor  # (R, N_p, 3), world units per frame step
    flow_bw: ad.Tensor  # (R, N_p, 3)


def warp_point(v, flow):
    """Displace a point by its scene flow: v + f."""
    if isinstance(v, ad.Tensor) or isinstance(flow, ad.Tensor):
        return ad.add(v, flow)
    return np.asarray(v) + np.asarray(flow)


class DynamicField:
    def __init__(
        self,
        rng,
        m_loc=10,
        m_dir=4,
        m_time=4,
        hidden=256,
        depth=8,
        color_hidden=128,
    ):
        self.m_loc = m_loc
        self.m_dir = m_dir
        self.m_time = m_time
        n_l = encoding_dim(3, m_loc)
        n_d = encoding_dim(3, m_dir)
        n_t = encoding_dim(1, m_time)
        self.n_l, self.n_d, self.n_t = n_l, n_d, n_t

        self.trunk = MLP(rng, n_l + n_t, hidden, depth)
        self.sigma_head = Linear(rng, hidden, 1)
        self.feat_head = Linear(rng, hidden, color_hidden)
        self.color_l1 = Linear(rng, color_hidden + n_d, color_hidden)
        self.color_out = Linear(rng, color_hidden, 3, init="glorot")
        self.flow_head = Linear(rng, hidden, 6, zero=True)

    def evaluate(self, points, dirs, times, flow_only=False):
        """points: (R, P, 3) array or Tensor; dirs: (R, 3); times: (R,) in [0, 1].

        ``flow_only`` skips the color branch (used by the flow-cycle loss).
        """
        times = np.asarray(times, dtype=np.float64)
        if (times < -1e-9).any() or (times > 1.0 + 1e-9).any():
            raise ValueError("normalized time index out of [0, 1]")
        pts = points if isinstance(points, ad.Tensor) else ad.Tensor(points)
        r, p = pts.shape[0], pts.shape[1]
        emb_x = positional_encode(pts, self.m_loc)
        emb_t = positional_encode(times.reshape(-1, 1), self.m_time)  # (R, n_t)
        emb_t_b = np.broadcast_to(emb_t[:, None, :], (r, p, self.n_t))
        x = ad.concat([emb_x, ad.Tensor(np.ascontiguousarray(emb_t_b))], axis=-1)

        h = self.trunk(ad.reshape(x, (r * p, self.n_l + self.n_t)))
        flows = ad.reshape(self.flow_head(h), (r, p, 6))
        flow_fw = flows[:, :, 0:3]
        flow_bw = flows[:, :, 3:6]
        if flow_only:
            return DynamicFieldOutput(sigma=None, color=None, flow_fw=flow_fw, flow_bw=flow_bw)

        sigma = ad.reshape(ad.softplus(self.sigma_head(h)), (r, p))
        emb_d = positional_encode(np.asarray(dirs), self.m_dir)
        emb_d_b = np.broadcast_to(emb_d[:, None, :], (r, p, self.n_d))
        d_flat = ad.Tensor(np.ascontiguousarray(emb_d_b).reshape(r * p, self.n_d))
        feat = self.feat_head(h)
        c = ad.relu(self.color_l1(ad.concat([feat, d_flat], axis=-1)))
        color = ad.reshape(ad.sigmoid(self.color_out(c)), (r, p, 3))
        return DynamicFieldOutput(sigma=sigma, color=color, flow_fw=flow_fw, flow_bw=flow_bw)

    def params(self, prefix="dynamic"):
        out = self.trunk.params(f"{prefix}.trunk")
        for name in ("sigma_head", "feat_head", "color_l1", "color_out", "flow_head"):
            out.update(getattr(self, name).params(f"{prefix}.{name}"))
        return out
