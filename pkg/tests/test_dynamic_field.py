import numpy as np
import pytest

from decompnerf import autodiff as ad
from decompnerf.dynamic_field import DynamicField, warp_point


@pytest.fixture(autouse=True)
def _float64():
    ad.set_dtype("float64")
    yield


def make_field(seed=0, **kw):
    defaults = dict(m_loc=4, m_dir=2, m_time=2, hidden=24, depth=2, color_hidden=12)
    defaults.update(kw)
    return DynamicField(np.random.default_rng(seed), **defaults)


def rand_batch(seed=1, r=2, p=4):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(r, p, 3)), rng.normal(size=(r, 3)), rng.random(r)


def test_pure_function():
    field = make_field()
    pts, dirs, times = rand_batch()
    a = field.evaluate(pts, dirs, times)
    b = field.evaluate(pts, dirs, times)
    for name in ("sigma", "color", "flow_fw", "flow_bw"):
        assert np.array_equal(getattr(a, name).values, getattr(b, name).values)


def test_flow_head_zero_initialized():
    field = make_field()
    pts, dirs, times = rand_batch()
    out = field.evaluate(pts, dirs, times)
    assert np.all(out.flow_fw.values == 0.0)
    assert np.all(out.flow_bw.values == 0.0)


def test_time_conditioning_and_zeroed_time_weights():
    field = make_field()
    pts, dirs, _ = rand_batch()
    t0 = np.zeros(2)
    t1 = np.ones(2)
    a = field.evaluate(pts, dirs, t0)
    b = field.evaluate(pts, dirs, t1)
    assert not np.allclose(a.sigma.values, b.sigma.values)
    # zero the trunk weights on the time-encoding columns: time invariance
    n_t = field.n_t
    field.trunk.hidden_layers[0].w.values[-n_t:, :] = 0.0
    a = field.evaluate(pts, dirs, t0)
    b = field.evaluate(pts, dirs, t1)
    assert np.array_equal(a.sigma.values, b.sigma.values)
    assert np.array_equal(a.color.values, b.color.values)


def test_time_out_of_range_errors():
    field = make_field()
    pts, dirs, _ = rand_batch()
    with pytest.raises(ValueError):
        field.evaluate(pts, dirs, np.array([0.0, 1.5]))


def test_density_ignores_direction():
    field = make_field()
    pts, _, times = rand_batch()
    a = field.evaluate(pts, np.tile([0.0, 0.0, 1.0], (2, 1)), times)
    b = field.evaluate(pts, np.tile([1.0, 0.0, 0.0], (2, 1)), times)
    assert np.array_equal(a.sigma.values, b.sigma.values)


def test_output_ranges():
    field = make_field()
    pts, dirs, times = rand_batch(seed=3)
    out = field.evaluate(pts, dirs, times)
    assert np.all(out.sigma.values >= 0.0)
    assert np.all((out.color.values >= 0.0) & (out.color.values <= 1.0))
    assert np.all(np.isfinite(out.flow_fw.values))


def test_warp_point():
    assert np.allclose(warp_point(np.array([1.0, 2.0, 3.0]), np.array([0.1, 0.0, 0.0])),
                       [1.1, 2.0, 3.0])
    v = np.array([0.375, -0.25, 5.0])
    assert np.array_equal(warp_point(v, np.zeros(3)), v)
    # dyadic components keep every intermediate sum exact
    f = np.array([0.5, 0.25, -0.125])
    assert np.array_equal(warp_point(warp_point(v, f), -f), v)


def test_warp_point_tensor_differentiable():
    v = ad.Tensor(np.array([[1.0, 2.0, 3.0]]), requires_grad=True)
    f = ad.Tensor(np.array([[0.1, 0.0, 0.0]]), requires_grad=True)
    ad.tsum(warp_point(v, f) * 2.0).backward()
    assert np.allclose(v.grad, 2.0)
    assert np.allclose(f.grad, 2.0)


def test_flow_only_skips_color():
    field = make_field()
    pts, dirs, times = rand_batch()
    out = field.evaluate(pts, dirs, times, flow_only=True)
    assert out.sigma is None and out.color is None
    assert out.flow_fw.shape == (2, 4, 3)


def test_gradients_through_warped_points():
    # flow displacement feeds back into the field input differentiably
    field = make_field()
    pts, dirs, times = rand_batch()
    params = field.params("dynamic")

    def fn():
        out = field.evaluate(pts, dirs, times)
        shifted = warp_point(ad.Tensor(pts), out.flow_fw + 0.05)
        out2 = field.evaluate(shifted, dirs, times)
        return ad.tmean(out2.sigma * out2.sigma) + ad.tmean(out2.color)

    report = ad.finite_diff_check(
        fn, params, eps=1e-5, tol=1e-4, rng=np.random.default_rng(0), samples_per_param=2
    )
    assert report.passed, report.max_rel_error
