"""Pinhole cameras, ray generation, stratified depth sampling, and the
frequency positional encoding used by all field inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray  # 3x4 camera-to-world
    width: int
    height: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (3, 4):
            raise ValueError(f"c2w must be 3x4, got {self.c2w.shape}")
        r = self.c2w[:, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation block is not orthonormal")

    @property
    def center(self):
        return self.c2w[:, 3]


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world 3x4 with -z pointing from eye to target."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise ValueError("view direction is parallel to up")
    right = right / n
    true_up = np.cross(right, fwd)
    # columns: x right, y up, z backward (OpenGL convention)
    rot = np.stack([right, true_up, -fwd], axis=1)
    return np.concatenate([rot, eye[:, None]], axis=1)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: tuple


@dataclass
class SampleBatch:
    """A batch of rays with stratified depth samples along each."""

    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3)
    near: float
    far: float
    depths: np.ndarray  # (R, N_p), strictly increasing
    deltas: np.ndarray  # (R, N_p), last one closes the interval to far
    pixels: np.ndarray | None = None  # (R, 2) integer (x, y), optional
    frames: np.ndarray | None = None  # (R,) frame index, optional

    @property
    def num_rays(self):
        return self.origins.shape[0]

    @property
    def n_samples(self):
        return self.depths.shape[1]

    def points(self):
        """World-space sample positions, shape (R, N_p, 3)."""
        return self.origins[:, None, :] + self.depths[..., None] * self.dirs[:, None, :]


def pixel_dirs(camera: Camera, px, py):
    """World-space unit directions through pixel centers (x+0.5, y+0.5)."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    x = (px + 0.5 - camera.cx) / camera.fx
    y = -(py + 0.5 - camera.cy) / camera.fy
    d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    d_world = d_cam @ camera.c2w[:, :3].T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def generate_rays(camera: Camera, pixels, near, far):
    """Rays through the given (x, y) pixel locations."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if (
        (pixels[:, 0] < 0).any()
        or (pixels[:, 0] >= camera.width).any()
        or (pixels[:, 1] < 0).any()
        or (pixels[:, 1] >= camera.height).any()
    ):
        raise ValueError("pixel out of image bounds")
    dirs = pixel_dirs(camera, pixels[:, 0], pixels[:, 1])
    o = camera.center
    return [
        Ray(origin=o.copy(), direction=d, near=near, far=far, pixel=(int(px), int(py)))
        for d, (px, py) in zip(dirs, pixels)
    ]


def project(camera: Camera, points):
    """World points -> (x, y) pixel coordinates (continuous)."""
    points = np.asarray(points, dtype=np.float64)
    rel = points - camera.center
    cam = rel @ camera.c2w[:, :3]  # world->camera: R^T
    z = -cam[..., 2]
    z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    x = camera.fx * cam[..., 0] / z + camera.cx - 0.5
    y = -camera.fy * cam[..., 1] / z + camera.cy - 0.5
    return np.stack([x, y], axis=-1)


def sample_depths(num_rays, n_p, near, far, rng=None, mode="stratified"):
    """Depth samples in N_p equal bins of [near, far].

    Modes: 'stratified' draws one uniform sample per bin (needs rng),
    'midpoint' takes bin centers, 'edges' takes left bin edges.
    """
    if n_p < 2:
        raise ValueError("n_p must be >= 2")
    width = (far - near) / n_p
    edges = near + width * np.arange(n_p)
    if mode == "stratified":
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.random(size=(num_rays, n_p))
        depths = edges[None, :] + u * width
    elif mode == "midpoint":
        depths = np.broadcast_to(edges + 0.5 * width, (num_rays, n_p)).copy()
    elif mode == "edges":
        depths = np.broadcast_to(edges, (num_rays, n_p)).copy()
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    deltas = np.empty_like(depths)
    deltas[:, :-1] = np.diff(depths, axis=1)
    deltas[:, -1] = far - depths[:, -1]
    return depths, deltas


def make_batch(origins, dirs, near, far, n_p, rng=None, mode="stratified", pixels=None, frames=None):
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    depths, deltas = sample_depths(origins.shape[0], n_p, near, far, rng=rng, mode=mode)
    return SampleBatch(
        origins=origins,
        dirs=dirs,
        near=near,
        far=far,
        depths=depths,
        deltas=deltas,
        pixels=pixels,
        frames=frames,
    )


def encoding_dim(dim, m, include_input=True):
    return dim * ((1 if include_input else 0) + 2 * m)


def positional_encode(x, m, include_input=True):
    """gamma(x): (x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{m-1} pi x), ...).

    Works on plain arrays and on autodiff Tensors (the latter keeps the
    encoding differentiable, which flow-warped field evaluations rely on).
    """
    if isinstance(x, ad.Tensor):
        parts = [x] if include_input else []
        for k in range(m):
            f = (2.0**k) * np.pi
            parts.append(ad.sin(x * f))
            parts.append(ad.cos(x * f))
        if not parts:
            raise ValueError("empty encoding (m=0 without input)")
        return ad.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    x = np.asarray(x, dtype=np.float64)
    parts = [x] if include_input else []
    for k in range(m):
        f = (2.0**k) * np.pi
        parts.append(np.sin(f * x))
        parts.append(np.cos(f * x))
    if not parts:
        raise ValueError("empty encoding (m=0 without input)")
    return np.concatenate(parts, axis=-1) if len(parts) > 1 else parts[0]
