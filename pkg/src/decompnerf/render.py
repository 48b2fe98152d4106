"""Discrete volume-rendering quadrature and its brute-force oracle.

Per-sample opacity alpha_k = 1 - exp(-sigma_k delta_k), accumulated
transparency T_k = exp(-sum_{j<k} sigma_j delta_j), quadrature weights
T_k alpha_k. Colors and depth are weighted sums, optionally modulated by the
per-sample occlusion weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class QuadratureTerms:
    alpha: ad.Tensor  # (R, N_p)
    trans: ad.Tensor  # (R, N_p), T_1 = 1, non-increasing
    weights: ad.Tensor  # (R, N_p), T_k * alpha_k


def quadrature(sigma, deltas):
    """sigma: (R, N_p) Tensor or array, >= 0; deltas: (R, N_p) array, > 0."""
    sigma = ad.as_tensor(sigma)
    deltas = np.asarray(deltas, dtype=np.float64)
    if sigma.shape != deltas.shape:
        raise ad.ShapeError(f"quadrature: sigma {sigma.shape} vs deltas {deltas.shape}")
    if (sigma.values < 0).any():
        raise ValueError("quadrature: negative density")
    if (deltas <= 0).any():
        raise ValueError("quadrature: non-positive interval")
    sd = sigma * ad.Tensor(deltas)
    incl = ad.cumsum(sd, axis=1)
    excl = incl - sd  # sum over j < k
    trans = ad.exp(-excl)
    alpha = 1.0 - ad.exp(-sd)
    return QuadratureTerms(alpha=alpha, trans=trans, weights=trans * alpha)


def render_weighted_color(terms: QuadratureTerms, colors, omega=None):
    """Sum_k T_k alpha_k c_k omega_k -> (R, 3). omega=None means omega = 1."""
    colors = ad.as_tensor(colors)
    w = terms.weights
    if omega is not None:
        w = w * ad.as_tensor(omega)
    r, p = w.shape
    return ad.tsum(ad.reshape(w, (r, p, 1)) * colors, axis=1)


def render_depth(weights, depths):
    """Expected ray depth Sum_k w_k s_k; weights may be any composited set."""
    weights = ad.as_tensor(weights)
    return ad.tsum(weights * ad.Tensor(np.asarray(depths)), axis=1)


def composite_sample_weights(tee, omega_b, omega_d, terms_b, terms_d):
    """Per-sample blend mirroring the pixel compositing rule, used for depth:
    tee * omega_b * w_b + (1 - tee) * omega_d * w_d."""
    tee = ad.as_tensor(tee)
    t = ad.reshape(tee, (tee.shape[0], 1))
    return t * omega_b * terms_b.weights + (1.0 - t) * omega_d * terms_d.weights


def oracle_render(sigma, deltas, colors, omega=None):
    """Scalar-loop reference renderer. Returns (rgb (R,3), weights (R,P))."""
    sigma = np.asarray(sigma, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    r, p = sigma.shape
    if omega is None:
        omega = np.ones((r, p))
    rgb = np.zeros((r, 3))
    weights = np.zeros((r, p))
    for i in range(r):
        acc = 0.0
        for k in range(p):
            t_k = np.exp(-acc)
            a_k = 1.0 - np.exp(-sigma[i, k] * deltas[i, k])
            w = t_k * a_k
            weights[i, k] = w
            for c in range(3):
                rgb[i, c] += w * colors[i, k, c] * omega[i, k]
            acc += sigma[i, k] * deltas[i, k]
    return rgb, weights
