"""Background distribution encoder.

A temporal-median proxy image of the clip is pushed through a small strided
conv net ending in a fully connected head. The head's mean vector mu is used
directly as the scene latent z (the posterior variance is pinned to zero),
and the distribution loss penalizes mu away from the unit-Gaussian prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nets import Linear

ENCODER_SIZE = 64  # proxy images are resized to ENCODER_SIZE x ENCODER_SIZE


@dataclass
class SceneLatent:
    mu: ad.Tensor  # (D,)
    z: ad.Tensor  # same node as mu: z = mu exactly
    dim: int


class Conv3x3Stride2:
    """3x3 stride-2 convolution with zero padding, via gather + matmul.

    Bound to a fixed input resolution; patch indices are precomputed once.
    """

    def __init__(self, rng, c_in, c_out, size, zero=False):
        self.c_in = c_in
        self.c_out = c_out
        self.size = size
        self.out_size = size // 2
        idx = np.zeros((self.out_size * self.out_size, 9), dtype=np.int64)
        mask = np.zeros((self.out_size * self.out_size, 9, 1))
        p = 0
        for oy in range(self.out_size):
            for ox in range(self.out_size):
                k = 0
                for ky in (-1, 0, 1):
                    for kx in (-1, 0, 1):
                        # pad=1: window centered at (2*oy, 2*ox)
                        yy = 2 * oy + ky
                        xx = 2 * ox + kx
                        if 0 <= yy < size and 0 <= xx < size:
                            idx[p, k] = yy * size + xx
                            mask[p, k, 0] = 1.0
                        k += 1
                p += 1
        self.idx = idx
        self.mask = mask
        if zero:
            w = np.zeros((9 * c_in, c_out))
        else:
            bound = np.sqrt(6.0 / (9 * c_in))
            w = rng.uniform(-bound, bound, size=(9 * c_in, c_out))
        self.w = ad.Tensor(w, requires_grad=True)
        self.b = ad.Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x):
        """x: (size*size, c_in) -> (out_size*out_size, c_out)."""
        patches = ad.take(x, self.idx)  # (P, 9, c_in)
        patches = patches * ad.Tensor(self.mask)
        flat = ad.reshape(patches, (self.idx.shape[0], 9 * self.c_in))
        return flat @ self.w + self.b

    def params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class DistributionEncoder:
    """4 stride-2 convs (16, 32, 64, 64 channels) + linear head of width D."""

    def __init__(self, rng, latent_dim=64, zero_head=False):
        self.latent_dim = latent_dim
        chans = [3, 16, 32, 64, 64]
        size = ENCODER_SIZE
        self.convs = []
        for i in range(4):
            self.convs.append(Conv3x3Stride2(rng, chans[i], chans[i + 1], size))
            size //= 2
        flat_dim = size * size * chans[-1]
        self.head = Linear(rng, flat_dim, latent_dim, init="glorot", zero=zero_head)

    def encode(self, proxy):
        """proxy: (ENCODER_SIZE, ENCODER_SIZE, 3) array in [0,1] -> SceneLatent."""
        proxy = np.asarray(proxy)
        if proxy.shape != (ENCODER_SIZE, ENCODER_SIZE, 3):
            raise ValueError(
                f"encoder input must be {(ENCODER_SIZE, ENCODER_SIZE, 3)}, got {proxy.shape}"
            )
        x = ad.Tensor(proxy.reshape(-1, 3))
        for conv in self.convs:
            x = ad.relu(conv(x))
        mu = ad.reshape(x, (1, -1)) @ self.head.w + self.head.b
        mu = ad.reshape(mu, (self.latent_dim,))
        return SceneLatent(mu=mu, z=mu, dim=self.latent_dim)

    def params(self, prefix="encoder"):
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"{prefix}.conv{i}"))
        out.update(self.head.params(f"{prefix}.head"))
        return out


def _downsample(img, size):
    """Area-average downsample to size x size (block mean when divisible)."""
    h, w = img.shape[:2]
    if h % size == 0 and w % size == 0:
        bh, bw = h // size, w // size
        return img.reshape(size, bh, size, bw, -1).mean(axis=(1, 3))
    from PIL import Image

    chans = []
    for c in range(img.shape[2]):
        im = Image.fromarray(img[:, :, c].astype(np.float32), mode="F")
        chans.append(np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float64))
    return np.stack(chans, axis=-1)


def background_proxy(images, size=ENCODER_SIZE):
    """Per-pixel temporal median of the clip, downsampled to the encoder size.

    With moving foreground covering any pixel in fewer than half the frames,
    the median recovers the clean background there.
    """
    if len(images) == 0:
        raise ValueError("background_proxy needs at least one frame")
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in images], axis=0)
    med = np.median(stack, axis=0)
    return _downsample(med, size)


def distribution_loss(latent: SceneLatent):
    """(1/D) sum_i -(1/2)(1 - mu_i^2); minimized at mu = 0 with value -1/2."""
    return ad.tmean(-0.5 * (1.0 - latent.mu * latent.mu))
