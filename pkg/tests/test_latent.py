import numpy as np
import pytest

from decompnerf import autodiff as ad
from decompnerf.latent import (
    ENCODER_SIZE,
    DistributionEncoder,
    SceneLatent,
    background_proxy,
    distribution_loss,
)


@pytest.fixture(autouse=True)
def _float64():
    ad.set_dtype("float64")
    yield


def test_proxy_single_frame_is_downsample():
    img = np.random.default_rng(0).random((128, 128, 3))
    got = background_proxy([img])
    want = img.reshape(64, 2, 64, 2, 3).mean(axis=(1, 3))
    assert np.allclose(got, want)


def test_proxy_constant_video():
    img = np.full((64, 64, 3), 0.3)
    got = background_proxy([img] * 5)
    assert np.allclose(got, 0.3)


def test_proxy_empty_errors():
    with pytest.raises(ValueError):
        background_proxy([])


def test_proxy_median_removes_transient_square():
    # bright square visits each pixel in fewer than half the frames
    frames = []
    for i in range(8):
        img = np.zeros((64, 64, 3))
        img[8 * i : 8 * i + 8, :, :] = 1.0  # occupies any pixel in exactly 1 frame
        frames.append(img)
    got = background_proxy(frames)
    assert np.allclose(got, 0.0)


def test_encode_zero_head_gives_zero_mu():
    enc = DistributionEncoder(np.random.default_rng(0), latent_dim=8, zero_head=True)
    latent = enc.encode(np.zeros((ENCODER_SIZE, ENCODER_SIZE, 3)))
    assert np.allclose(latent.mu.values, 0.0)
    assert latent.z is latent.mu  # z = mu exactly


def test_encode_deterministic():
    enc = DistributionEncoder(np.random.default_rng(1), latent_dim=8)
    proxy = np.random.default_rng(2).random((ENCODER_SIZE, ENCODER_SIZE, 3))
    a = enc.encode(proxy).mu.values
    b = enc.encode(proxy).mu.values
    assert np.array_equal(a, b)


def test_encode_sensitive_to_pixels():
    enc = DistributionEncoder(np.random.default_rng(1), latent_dim=8)
    proxy = np.random.default_rng(2).random((ENCODER_SIZE, ENCODER_SIZE, 3))
    base = enc.encode(proxy).mu.values.copy()
    proxy2 = proxy.copy()
    proxy2[10, 20] += 0.5
    assert not np.allclose(enc.encode(proxy2).mu.values, base)


def test_encode_rejects_wrong_size():
    enc = DistributionEncoder(np.random.default_rng(0), latent_dim=8)
    with pytest.raises(ValueError):
        enc.encode(np.zeros((32, 32, 3)))


def _loss_of(mu):
    m = ad.Tensor(np.asarray(mu, dtype=np.float64))
    return float(distribution_loss(SceneLatent(mu=m, z=m, dim=m.size)).values)


def test_distribution_loss_hand_values():
    assert _loss_of([0.0, 0.0]) == -0.5
    assert _loss_of([1.0, 1.0]) == 0.0
    assert _loss_of([3.0, 0.0]) == 1.75


def test_distribution_loss_minimum_independent_of_dim():
    for d in (1, 3, 17):
        assert _loss_of(np.zeros(d)) == -0.5
        assert _loss_of(np.full(d, 0.1)) > -0.5


def test_distribution_loss_gradient():
    mu = ad.Tensor(np.array([0.4, -1.2, 0.0]), requires_grad=True)
    latent = SceneLatent(mu=mu, z=mu, dim=3)
    distribution_loss(latent).backward()
    assert np.allclose(mu.grad, mu.values / 3.0, atol=1e-15)
    report = ad.finite_diff_check(
        lambda: distribution_loss(latent), {"mu": mu}, eps=1e-6, tol=1e-8
    )
    assert report.passed


def test_encoder_gradient_reaches_all_parameters():
    enc = DistributionEncoder(np.random.default_rng(3), latent_dim=4)
    proxy = np.random.default_rng(4).random((ENCODER_SIZE, ENCODER_SIZE, 3))
    latent = enc.encode(proxy)
    distribution_loss(latent).backward()
    for name, p in enc.params("encoder").items():
        assert p.grad is not None, name
