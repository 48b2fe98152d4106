import io

import numpy as np
import pytest

from decompnerf import autodiff as ad
from decompnerf.rays import make_batch, pixel_dirs
from decompnerf.scenegen import generate_scene
from decompnerf.training import (
    Adam,
    LossWeights,
    TrainConfig,
    Trainer,
    TrainingAborted,
    depth_loss,
    downsample_frames,
    flow_regularization,
    flow_supervision,
    motion_mask,
    overall_loss,
    parse_config,
    reconstruction_loss,
)

from test_scenegen import moving_sphere, tiny_spec


@pytest.fixture(autouse=True)
def _float64():
    ad.set_dtype("float64")
    yield


# ---------------------------------------------------------------------------
# loss hand values


def test_reconstruction_loss_hand_value():
    # every ray off by (0.1, 0, 0): squared L2 per ray = 0.01
    pred = ad.Tensor(np.full((5, 3), 0.3))
    target = np.full((5, 3), 0.3)
    target[:, 0] -= 0.1
    assert abs(float(reconstruction_loss(pred, target).values) - 0.01) < 1e-15
    assert float(reconstruction_loss(pred, np.full((5, 3), 0.3)).values) == 0.0


def test_depth_loss_hand_value():
    pred = ad.Tensor(np.array([1.5, 2.5]))
    assert abs(float(depth_loss(pred, np.array([1.0, 3.0])).values) - 0.25) < 1e-15


def test_flow_supervision_hand_value():
    # every sample off by (0.2, 0, 0) forward and exact backward: mean 0.04
    fw = ad.Tensor(np.full((2, 3, 3), 0.0))
    bw = ad.Tensor(np.zeros((2, 3, 3)))
    gt_fw = np.zeros((2, 3))
    gt_fw[:, 0] = 0.2
    got = float(flow_supervision(fw, bw, gt_fw, np.zeros((2, 3))).values)
    assert abs(got - 0.04) < 1e-15


def test_flow_regularization_l1_only_and_cycle():
    fw = ad.Tensor(np.full((2, 4, 3), 0.1))
    bw = ad.Tensor(np.zeros((2, 4, 3)))
    n_frames = 4
    l1_only = float(flow_regularization(None, None, fw, bw, n_frames).values)
    assert abs(l1_only - 0.3 / 3.0) < 1e-15
    cyc_a = ad.Tensor(np.full((1, 4, 3), 0.2))
    cyc_b = ad.Tensor(np.zeros((1, 4, 3)))
    with_cycle = float(flow_regularization(cyc_a, cyc_b, fw, bw, n_frames).values)
    assert abs(with_cycle - (3 * 0.04 + l1_only)) < 1e-15


def test_overall_loss_hand_value():
    terms = {
        name: ad.Tensor(np.asarray(float(v)))
        for name, v in zip(("rec", "dist", "depth", "cons", "flow", "w"),
                           (1, 2, 3, 4, 5, 6))
    }
    got = float(overall_loss(terms, LossWeights()).values)
    # 1*1 + 0.5*2 + 0.03*3 + 0.03*4 + 0.01*5 + 0.5*6
    assert abs(got - 5.26) < 1e-12
    with pytest.raises(KeyError):
        overall_loss({"rec": terms["rec"]}, LossWeights())


def test_lambda_defaults_and_negative_rejected():
    w = LossWeights()
    assert (w.rec, w.dist, w.depth, w.cons, w.flow, w.w) == (
        1.0, 5e-1, 3e-2, 3e-2, 1e-2, 5e-1
    )
    with pytest.raises(ValueError):
        LossWeights(depth=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(lambda_rec=-1.0).weights()


def test_toggles_zero_their_weights():
    cfg = TrainConfig(use_latent=False, use_flow_losses=False)
    w = cfg.weights()
    assert w.dist == 0.0 and w.cons == 0.0 and w.flow == 0.0
    assert w.rec == 1.0 and w.w == 5e-1


# ---------------------------------------------------------------------------
# optimizer


def test_adam_first_step_magnitude():
    # after bias correction the first update is -lr * g / (|g| + eps)
    p = ad.Tensor(np.zeros(4), requires_grad=True)
    opt = Adam({"p": p}, lr=1e-2)
    p.grad = np.array([1.0, -2.0, 0.5, 100.0])
    opt.step()
    assert np.allclose(p.values, -1e-2 * np.sign(p.grad), atol=1e-9)
    assert opt.t == 1


def test_adam_skips_gradless_params():
    p = ad.Tensor(np.ones(3), requires_grad=True)
    q = ad.Tensor(np.ones(3), requires_grad=True)
    opt = Adam({"p": p, "q": q})
    p.grad = np.ones(3)
    opt.step()
    assert np.array_equal(q.values, np.ones(3))
    assert not np.array_equal(p.values, np.ones(3))


# ---------------------------------------------------------------------------
# motion mask


def _mask_batch(cam, n, depth_val):
    px = np.arange(n)
    py = np.full(n, cam.height // 2)
    dirs = pixel_dirs(cam, px, py)
    origins = np.broadcast_to(cam.center, dirs.shape)
    return make_batch(origins, dirs, depth_val - 0.5, depth_val + 0.5, 4,
                      mode="midpoint", frames=np.zeros(n, dtype=np.int64))


def test_motion_mask_zero_flow_is_empty():
    spec = tiny_spec()
    cam = spec.cameras[0]
    batch = _mask_batch(cam, 6, 4.0)
    w = np.ones((6, 4))
    mask = motion_mask(batch, [cam], w, np.zeros((6, 4, 3)), np.zeros((6, 4, 3)))
    assert not mask.any()


def test_motion_mask_large_flow_flags_all():
    spec = tiny_spec()
    cam = spec.cameras[0]
    batch = _mask_batch(cam, 6, 4.0)
    w = np.ones((6, 4))
    big = np.full((6, 4, 3), 1.0)
    mask = motion_mask(batch, [cam], w, big, np.zeros((6, 4, 3)))
    assert mask.all()


def test_motion_mask_respects_tau():
    spec = tiny_spec()
    cam = spec.cameras[0]
    batch = _mask_batch(cam, 4, 4.0)
    w = np.ones((4, 4))
    # a tiny flow projects to well under a pixel at this depth/focal length
    small = np.full((4, 4, 3), 1e-4)
    assert not motion_mask(batch, [cam], w, small, small, tau=0.5).any()
    assert motion_mask(batch, [cam], w, small, small, tau=1e-7).all()


def test_motion_mask_iou_after_warmup():
    # warm-up drives the sampled flows toward the ground truth, so the
    # projected motion mask should overlap the analytic dynamic mask
    from decompnerf.scenegen import Actor

    spec = tiny_spec(
        actors=[Actor(kind="sphere", size=(0.6,), albedo=(0.9, 0.2, 0.2),
                      start=(-0.5, 0.0, 0.6), velocity=(0.5, 0.0, 0.0))],
        n_frames=4, width=32, height=24,
    )
    spec.near, spec.far = 2.5, 7.0
    frames = generate_scene(spec)
    cfg = TrainConfig(
        steps=1000, warmup_steps=1000, n_rand=128, n_p=8, seed=0,
        precision="float64", latent_dim=8, n_s=8, n_tokens=2,
        m_loc=6, m_dir=2, m_time=2, hidden=32, depth=2,
        color_hidden=12, occ_hidden=12, occ_depth=2, lr=3e-3,
    )
    tr = Trainer(frames, spec.near, spec.far, cfg)
    for i in range(cfg.steps):
        tr.step(i)
    # evaluate on every pixel of frame 1
    fi_val = 1
    h, w = tr.h, tr.w
    pi = np.arange(h * w)
    fi = np.full(h * w, fi_val)
    batch = make_batch(
        tr.centers[fi], tr.dirs[fi_val], spec.near, spec.far, cfg.n_p,
        mode="midpoint", frames=fi,
    )
    with ad.no_grad():
        latent = tr.pipeline.compute_latent(tr.proxy)
        out = tr.pipeline.render_ray_batch(
            batch, fi / (len(frames) - 1), tr.images[0, pi], latent
        )
    mask = motion_mask(
        batch, tr.cameras, out["quad_d"].weights.values,
        out["dynamic"].flow_fw.values, out["dynamic"].flow_bw.values, tau=cfg.tau,
    )
    gt = frames[fi_val].dyn_mask.reshape(-1)
    inter = np.logical_and(mask, gt).sum()
    union = np.logical_or(mask, gt).sum()
    assert union > 0
    assert inter / union >= 0.7, f"IoU {inter / union:.3f}"


# ---------------------------------------------------------------------------
# config parsing


def test_parse_config_basic_and_comments():
    text = io.StringIO(
        "# a comment\n"
        "steps = 12\n"
        "lr = 1e-3  # inline\n"
        "use_latent = false\n"
        "precision = float64\n"
        "\n"
    )
    cfg = parse_config(text)
    assert cfg.steps == 12 and cfg.lr == 1e-3
    assert cfg.use_latent is False and cfg.precision == "float64"


def test_parse_config_lambdas_shorthand():
    cfg = parse_config(io.StringIO("lambdas = 1, 0.7, 0.3, 0.2, 0.1, 0.5\n"))
    assert cfg.lambda_rec == 1.0 and cfg.lambda_dist == 0.7
    assert cfg.lambda_flow == 0.1 and cfg.lambda_w == 0.5
    with pytest.raises(ValueError):
        parse_config(io.StringIO("lambdas = 1, 2\n"))


def test_parse_config_rejects_unknown_and_malformed():
    with pytest.raises(ValueError, match="unknown key"):
        parse_config(io.StringIO("bogus = 3\n"))
    with pytest.raises(ValueError):
        parse_config(io.StringIO("steps 3\n"))
    with pytest.raises(ValueError):
        parse_config(io.StringIO("use_latent = maybe\n"))
    with pytest.raises(ValueError):
        parse_config(io.StringIO(""), overrides={"bogus": 1})


def test_parse_config_overrides_win():
    cfg = parse_config(io.StringIO("steps = 10\n"), overrides={"steps": 99, "seed": 3})
    assert cfg.steps == 99 and cfg.seed == 3


def test_resolution_downsample():
    spec = tiny_spec(n_frames=2, width=24, height=18)
    frames = generate_scene(spec)
    small = downsample_frames(frames, 9)
    assert small[0].image.shape == (9, 12, 3)
    assert small[0].camera.fx == frames[0].camera.fx / 2
    # block means are exact
    want = frames[0].image.reshape(9, 2, 12, 2, 3).mean(axis=(1, 3))
    assert np.array_equal(small[0].image, want)
    with pytest.raises(ValueError):
        downsample_frames(frames, 7)
    assert downsample_frames(frames, 18) is frames
    assert downsample_frames(frames, 0) is frames


# ---------------------------------------------------------------------------
# trainer behavior


def _mini_cfg(**kw):
    base = dict(
        steps=10, warmup_steps=4, n_rand=12, n_p=6, seed=0,
        precision="float64", latent_dim=8, n_s=8, n_tokens=2,
        m_loc=3, m_dir=2, m_time=2, hidden=12, depth=2,
        color_hidden=8, occ_hidden=8, occ_depth=2,
    )
    base.update(kw)
    return TrainConfig(**base)


def _mini_scene():
    spec = tiny_spec(actors=[moving_sphere()], n_frames=3)
    return spec, generate_scene(spec)


def test_seeded_runs_bit_identical():
    spec, frames = _mini_scene()
    rows_a = [Trainer(frames, spec.near, spec.far, _mini_cfg()).step(i) for i in range(0)]
    t1 = Trainer(frames, spec.near, spec.far, _mini_cfg())
    t2 = Trainer(frames, spec.near, spec.far, _mini_cfg())
    for i in range(10):
        a = t1.step(i)
        b = t2.step(i)
        assert a["total"] == b["total"], i
        assert a["rec"] == b["rec"]
    for k, p in t1.pipeline.params().items():
        assert np.array_equal(p.values, t2.pipeline.params()[k].values), k


def test_warmup_uses_rec_and_flow_sup_only():
    spec, frames = _mini_scene()
    tr = Trainer(frames, spec.near, spec.far, _mini_cfg())
    row = tr.step(0)
    assert row["phase"] == "warmup"
    assert np.isfinite(row["flow_sup"])
    assert np.isnan(row["cons"]) and np.isnan(row["w"])
    row_full = tr.step(4)
    assert row_full["phase"] == "full"
    assert np.isnan(row_full["flow_sup"])
    assert np.isfinite(row_full["w"])


def test_flow_supervision_gradient_avoids_static_field():
    spec, frames = _mini_scene()
    tr = Trainer(frames, spec.near, spec.far, _mini_cfg())
    batch, fi, pi, times, target, prev = tr.sample_batch()
    latent = tr.pipeline.compute_latent(tr.proxy)
    out = tr.pipeline.render_ray_batch(batch, times, prev, latent)
    sup = flow_supervision(
        out["dynamic"].flow_fw, out["dynamic"].flow_bw,
        tr.flow_fw_gt[fi, pi], tr.flow_bw_gt[fi, pi],
    )
    tr.opt.zero_grad()
    sup.backward()
    for name, p in tr.params.items():
        if name.startswith("static") or name.startswith("encoder"):
            assert p.grad is None or np.all(p.grad == 0.0), name


def test_nan_abort(tmp_path):
    spec, frames = _mini_scene()
    tr = Trainer(frames, spec.near, spec.far, _mini_cfg(), out_dir=tmp_path)
    next(iter(tr.params.values())).values[...] = np.nan
    with pytest.raises(TrainingAborted):
        tr.step(0)
    assert list(tmp_path.glob("abort_step0.npz"))


def test_short_training_reduces_reconstruction(tmp_path):
    spec, frames = _mini_scene()
    cfg = _mini_cfg(steps=60, warmup_steps=10, n_rand=48, lr=2e-3, log_every=5)
    tr = Trainer(frames, spec.near, spec.far, cfg, out_dir=tmp_path)
    summary = tr.train()
    assert summary["steps"] == 60
    assert summary["last_rec"] < summary["first_rec"] * 0.8
    csv_text = (tmp_path / "metrics.csv").read_text()
    assert csv_text.startswith("step,phase,rec,")
    assert (tmp_path / "checkpoint.npz").exists()
