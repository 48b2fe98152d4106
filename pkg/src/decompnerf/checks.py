"""Self-verification suites behind ``decompnerf check``.

Three suites, each returning (passed, report lines):

* ``grad``    finite-difference checks of every loss term on tiny ray
              batches at 64-bit precision;
* ``quad``    accumulated-opacity identity for homogeneous media and
              vectorized-vs-scalar-oracle equality;
* ``algebra`` exact compositing/loss-value identities and linearity of the
              overall objective's gradient in its term weights.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import render as rd
from .latent import distribution_loss
from .occlusion import transmittance_loss
from .rays import make_batch
from .scenegen import generate_scene, orbit_sphere_spec
from .training import (
    LossWeights,
    Trainer,
    TrainConfig,
    overall_loss,
    reconstruction_loss,
    depth_loss,
    flow_supervision,
)

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-12
ALGEBRA_TOL = 1e-12
LINEARITY_TOL = 1e-10

_TINY = dict(
    n_rand=4,
    n_p=8,
    latent_dim=16,
    n_s=16,
    n_tokens=4,
    m_loc=4,
    m_dir=2,
    m_time=2,
    hidden=16,
    depth=2,
    color_hidden=8,
    occ_hidden=8,
    occ_depth=2,
    precision="float64",
)

LOSS_TERMS = ("rec", "dist", "depth", "cons", "flow", "w", "flow_sup")


def _tiny_trainer(seed=0, **extra):
    spec = orbit_sphere_spec()
    frames = generate_scene(spec)[:4]
    cfg = TrainConfig(seed=seed, **{**_TINY, **extra})
    return Trainer(frames, spec.near, spec.far, cfg)


def _term_fn(trainer, batch, fi, pi, times, target, prev, term, mask):
    """Closure recomputing one loss term from current parameter values."""

    def fn():
        latent = trainer.pipeline.compute_latent(trainer.proxy)
        out = trainer.pipeline.render_ray_batch(batch, times, prev, latent)
        if term == "rec":
            return reconstruction_loss(out["composite"], target)
        if term == "dist":
            return distribution_loss(latent)
        if term == "depth":
            return depth_loss(out["depth"], trainer.depths_gt[fi, pi])
        if term == "cons":
            return trainer._consistency(batch, out, fi, pi, target, times, mask=mask)[0]
        if term == "flow":
            return trainer._flow_reg(batch, out, fi, times)
        if term == "w":
            return transmittance_loss(out["occ"])
        if term == "flow_sup":
            return flow_supervision(
                out["dynamic"].flow_fw,
                out["dynamic"].flow_bw,
                trainer.flow_fw_gt[fi, pi],
                trainer.flow_bw_gt[fi, pi],
            )
        raise ValueError(f"unknown loss term {term!r}")

    return fn


def check_gradients(n_batches=20, seed=0, tensors_per_term=6, samples_per_param=2, tol=GRAD_TOL):
    """Finite-difference check of each loss term over random micro-batches.

    Probes a random subset of parameter tensors (and elements) per term so
    the whole sweep stays within its time budget; over 20 batches every
    tensor is visited many times.
    """
    with ad.precision("float64"):
        trainer = _tiny_trainer(seed=seed)
        params = trainer.params
        names = sorted(params)
        rng = np.random.default_rng(seed + 7)
        worst = 0.0
        worst_at = ""
        for b in range(n_batches):
            batch, fi, pi, times, target, prev = trainer.sample_batch()
            mask = np.ones(batch.num_rays, dtype=bool)  # exercise every ray
            for term in LOSS_TERMS:
                picked = rng.choice(names, size=min(tensors_per_term, len(names)), replace=False)
                fn = _term_fn(trainer, batch, fi, pi, times, target, prev, term, mask)
                report = ad.finite_diff_check(
                    fn,
                    {n: params[n] for n in picked},
                    eps=1e-5,
                    tol=tol,
                    rng=rng,
                    samples_per_param=samples_per_param,
                )
                if report.max_rel_error > worst:
                    worst = report.max_rel_error
                    worst_at = f"batch {b}, term {term}"
        lines = [
            f"grad: {n_batches} micro-batches x {len(LOSS_TERMS)} loss terms, "
            f"max rel error {worst:.3e} ({worst_at}), tol {tol:g}"
        ]
        return worst <= tol, lines


def check_quadrature(seed=0, n_batches=100):
    """Homogeneous-medium opacity identity and oracle agreement."""
    lines = []
    ok = True
    with ad.precision("float64"):
        # sum of weights telescopes to 1 - exp(-sigma * covered length)
        for n_p, tol in ((128, 1e-3), (256, 1e-6)):
            sigma_val, length = 1.3, 1.0
            batch = make_batch(
                np.zeros((1, 3)), np.array([[0.0, 0.0, -1.0]]), 0.0 + 1e-9, length, n_p, mode="edges"
            )
            terms = rd.quadrature(np.full((1, n_p), sigma_val), batch.deltas)
            got = float(terms.weights.values.sum())
            want = 1.0 - np.exp(-sigma_val * (length - batch.depths[0, 0]))
            err = abs(got - want)
            ok &= err <= tol
            lines.append(f"quad: homogeneous opacity N_p={n_p} error {err:.3e} (tol {tol:g})")
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_batches):
            r, p = 8, 16
            sigma = rng.random((r, p)) * 3.0
            deltas = rng.random((r, p)) * 0.2 + 1e-3
            colors = rng.random((r, p, 3))
            omega = rng.random((r, p))
            terms = rd.quadrature(sigma, deltas)
            fast = rd.render_weighted_color(terms, colors, ad.Tensor(omega)).values
            slow_rgb, slow_w = rd.oracle_render(sigma, deltas, colors, omega)
            worst = max(
                worst,
                np.abs(fast - slow_rgb).max(),
                np.abs(terms.weights.values - slow_w).max(),
            )
        ok &= worst <= ORACLE_TOL
        lines.append(
            f"quad: vectorized vs scalar oracle over {n_batches} batches, "
            f"max abs diff {worst:.3e} (tol {ORACLE_TOL:g})"
        )
    return ok, lines


def check_algebra(seed=0):
    """Exact identities: compositing, distribution-loss values, and
    linearity of the overall gradient in the term weights."""
    from .occlusion import composite_pixel
    from .latent import SceneLatent

    lines = []
    ok = True
    with ad.precision("float64"):
        rng = np.random.default_rng(seed)
        cb = ad.Tensor(rng.random((5, 3)))
        cd = ad.Tensor(rng.random((5, 3)))
        cases = [
            (np.zeros(5), cd.values),
            (np.ones(5), cb.values),
            (np.full(5, 0.5), 0.5 * cb.values + 0.5 * cd.values),
        ]
        worst = max(
            np.abs(composite_pixel(ad.Tensor(t), cb, cd).values - want).max()
            for t, want in cases
        )
        ok &= worst <= ALGEBRA_TOL
        lines.append(f"algebra: compositing identities max abs err {worst:.3e}")

        def dval(mu):
            m = ad.Tensor(np.asarray(mu, dtype=np.float64))
            return float(distribution_loss(SceneLatent(mu=m, z=m, dim=m.size)).values)

        vals = [
            (dval([0.0, 0.0]), -0.5),
            (dval([1.0, 1.0]), 0.0),
            (dval([3.0, 0.0]), 1.75),
        ]
        worst = max(abs(a - b) for a, b in vals)
        ok &= worst == 0.0
        lines.append(f"algebra: distribution-loss hand values max abs err {worst:.3e}")

        # gradient of the weighted objective = weighted sum of term gradients
        trainer = _tiny_trainer(seed=seed)
        batch, fi, pi, times, target, prev = trainer.sample_batch()
        mask = np.ones(batch.num_rays, dtype=bool)
        weights = LossWeights(rec=1.0, dist=0.7, depth=0.3, cons=0.2, flow=0.1, w=0.5)
        per_term = {}
        for term in ("rec", "dist", "depth", "cons", "flow", "w"):
            for p in trainer.params.values():
                p.zero_grad()
            _term_fn(trainer, batch, fi, pi, times, target, prev, term, mask)().backward()
            per_term[term] = {
                k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
                for k, p in trainer.params.items()
            }
        for p in trainer.params.values():
            p.zero_grad()
        terms = {
            t: _term_fn(trainer, batch, fi, pi, times, target, prev, t, mask)()
            for t in per_term
        }
        overall_loss(terms, weights).backward()
        worst = 0.0
        for k, p in trainer.params.items():
            combo = sum(
                getattr(weights, t) * per_term[t][k] for t in per_term
            )
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            worst = max(worst, np.abs(g - combo).max())
        ok &= worst <= LINEARITY_TOL
        lines.append(
            f"algebra: objective-gradient linearity max abs err {worst:.3e} (tol {LINEARITY_TOL:g})"
        )
    return ok, lines


SUITES = {
    "grad": check_gradients,
    "quad": check_quadrature,
    "algebra": check_algebra,
}


def run_suite(name):
    """Run one named suite or 'all'; returns (passed, lines)."""
    if name == "all":
        ok, lines = True, []
        for key in ("grad", "quad", "algebra"):
            sub_ok, sub_lines = SUITES[key]()
            ok &= sub_ok
            lines.extend(sub_lines)
        return ok, lines
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r} (choose from grad, quad, algebra, all)")
    return SUITES[name]()
