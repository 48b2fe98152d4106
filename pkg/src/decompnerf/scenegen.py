"""Synthetic dynamic scenes with analytic ground truth.

A closed-form ray tracer (Lambertian shading, no shadows) renders a textured
ground plane plus rigidly translating actor primitives. Every frame carries
exact depth, exact 3D scene flow to the neighboring frames, and the exact
dynamic mask, standing in for the external flow/depth/pose estimators a real
capture would need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .rays import Camera, look_at, pixel_dirs


@dataclass
class Actor:
    kind: str  # "sphere" or "box"
    size: tuple  # sphere: (radius,); box: (hx, hy, hz) half-extents
    albedo: tuple
    start: tuple  # center position at frame 0
    velocity: tuple  # world units per frame

    def center(self, i):
        return np.asarray(self.start, dtype=np.float64) + float(i) * np.asarray(
            self.velocity, dtype=np.float64
        )


@dataclass
class SceneSpec:
    name: str
    width: int
    height: int
    n_frames: int
    near: float
    far: float
    cameras: list  # one Camera per frame
    actors: list = field(default_factory=list)
    plane_z: float = 0.0
    tex_mode: int = kernels.TEX_CHECKER
    tex_scale: float = 1.0
    plane_c0: tuple = (0.85, 0.8, 0.7)
    plane_c1: tuple = (0.35, 0.4, 0.5)
    sky: tuple = (0.6, 0.7, 0.9)
    light: tuple = (0.3, 0.25, 0.92)
    ambient: float = 0.35


@dataclass
class SceneFrame:
    index: int
    camera: Camera
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W), distance along the ray
    flow_fw: np.ndarray  # (H, W, 3) 3D scene flow to frame i+1, zero off-actor
    flow_bw: np.ndarray  # (H, W, 3)
    dyn_mask: np.ndarray  # (H, W) bool


def _flat_arrays(spec: SceneSpec, i):
    """Split actors into the flat sphere/box arrays the kernels expect."""
    sph_c, sph_r, sph_alb = [], [], []
    box_min, box_max, box_alb = [], [], []
    sph_ids, box_ids = [], []
    for a_idx, actor in enumerate(spec.actors):
        c = actor.center(i)
        if actor.kind == "sphere":
            sph_c.append(c)
            sph_r.append(actor.size[0])
            sph_alb.append(actor.albedo)
            sph_ids.append(a_idx)
        elif actor.kind == "box":
            half = np.asarray(actor.size, dtype=np.float64)
            box_min.append(c - half)
            box_max.append(c + half)
            box_alb.append(actor.albedo)
            box_ids.append(a_idx)
        else:
            raise ValueError(f"unknown actor kind {actor.kind!r}")
    return (
        np.asarray(sph_c, dtype=np.float64).reshape(-1, 3),
        np.asarray(sph_r, dtype=np.float64),
        np.asarray(sph_alb, dtype=np.float64).reshape(-1, 3),
        np.asarray(box_min, dtype=np.float64).reshape(-1, 3),
        np.asarray(box_max, dtype=np.float64).reshape(-1, 3),
        np.asarray(box_alb, dtype=np.float64).reshape(-1, 3),
        sph_ids + box_ids,  # hit_id - 1 -> actor index
    )


def trace_frame(spec: SceneSpec, camera: Camera, i, force=None):
    """Render one frame; returns (color, depth, actor_index) as H x W maps.

    actor_index is -1 for sky/background, otherwise an index into spec.actors.
    """
    if camera.fx <= 0 or camera.fy <= 0:
        raise ValueError("degenerate camera: non-positive focal length")
    h, w = camera.height, camera.width
    px, py = np.meshgrid(np.arange(w), np.arange(h))
    dirs = pixel_dirs(camera, px.ravel(), py.ravel())
    origins = np.broadcast_to(camera.center, dirs.shape)
    sph_c, sph_r, sph_alb, box_min, box_max, box_alb, id_map = _flat_arrays(spec, i)
    color, depth, hit_id = kernels.trace_rays(
        origins,
        dirs,
        spec.plane_z,
        spec.tex_mode,
        spec.tex_scale,
        spec.plane_c0,
        spec.plane_c1,
        sph_c,
        sph_r,
        sph_alb,
        box_min,
        box_max,
        box_alb,
        spec.light,
        spec.ambient,
        spec.sky,
        spec.far,
        force=force,
    )
    actor_idx = np.full(hit_id.shape, -1, dtype=np.int64)
    hit_actor = hit_id >= 1
    if hit_actor.any():
        id_map_arr = np.asarray(id_map, dtype=np.int64)
        actor_idx[hit_actor] = id_map_arr[hit_id[hit_actor] - 1]
    return (
        np.clip(color, 0.0, 1.0).reshape(h, w, 3),
        depth.reshape(h, w),
        actor_idx.reshape(h, w),
    )


def generate_scene(spec: SceneSpec, seed=0, force=None):
    """Render all frames with ground-truth depth, scene flow, and masks.

    The tracer is deterministic; ``seed`` is accepted for interface symmetry
    with the stochastic parts of the pipeline.
    """
    if len(spec.cameras) != spec.n_frames:
        raise ValueError("spec needs one camera per frame")
    frames = []
    for i in range(spec.n_frames):
        camera = spec.cameras[i]
        image, depth, actor_idx = trace_frame(spec, camera, i, force=force)
        h, w = image.shape[:2]
        flow_fw = np.zeros((h, w, 3))
        flow_bw = np.zeros((h, w, 3))
        for a_idx, actor in enumerate(spec.actors):
            on = actor_idx == a_idx
            if not on.any():
                continue
            flow_fw[on] = actor.center(i + 1) - actor.center(i)
            flow_bw[on] = actor.center(i - 1) - actor.center(i)
        frames.append(
            SceneFrame(
                index=i,
                camera=camera,
                image=image,
                depth=depth,
                flow_fw=flow_fw,
                flow_bw=flow_bw,
                dyn_mask=actor_idx >= 0,
            )
        )
    return frames


def strip_actors(spec: SceneSpec):
    """The same scene with no dynamic content (clean-background reference)."""
    return SceneSpec(
        **{
            **{f: getattr(spec, f) for f in spec.__dataclass_fields__},
            "name": spec.name + "-background",
            "actors": [],
        }
    )


def _pinhole(width, height, fov_deg, c2w):
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    return Camera(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, c2w=c2w, width=width, height=height)


def orbit_sphere_spec():
    """Moving camera, one translating sphere over a smoothly textured plane."""
    n_frames = 10
    width = height = 64
    cameras = []
    for i in range(n_frames):
        ang = np.radians(-14.0 + 28.0 * i / (n_frames - 1))
        eye = (4.2 * np.sin(ang), -4.2 * np.cos(ang), 2.4)
        cameras.append(_pinhole(width, height, 46.0, look_at(eye, (0.0, 0.0, 0.45))))
    return SceneSpec(
        name="orbit-sphere",
        width=width,
        height=height,
        n_frames=n_frames,
        near=2.0,
        far=9.0,
        cameras=cameras,
        actors=[
            Actor(
                kind="sphere",
                size=(0.5,),
                albedo=(0.85, 0.25, 0.2),
                start=(-0.9, 0.15, 0.5),
                velocity=(0.2, 0.0, 0.0),
            )
        ],
        tex_mode=kernels.TEX_SMOOTH,
        tex_scale=2.4,
        plane_c0=(0.82, 0.72, 0.55),
        plane_c1=(0.25, 0.42, 0.55),
    )


def street_toy_spec():
    """Static camera, two box 'vehicles' crossing a checkered ground."""
    n_frames = 20
    width, height = 64, 48
    c2w = look_at((0.0, -5.2, 1.7), (0.0, 0.0, 0.45))
    cameras = [_pinhole(width, height, 50.0, c2w) for _ in range(n_frames)]
    return SceneSpec(
        name="street-toy",
        width=width,
        height=height,
        n_frames=n_frames,
        near=2.0,
        far=11.0,
        cameras=cameras,
        actors=[
            Actor(
                kind="box",
                size=(0.4, 0.22, 0.26),
                albedo=(0.2, 0.45, 0.8),
                start=(-1.9, 0.6, 0.26),
                velocity=(0.2, 0.0, 0.0),
            ),
            Actor(
                kind="box",
                size=(0.35, 0.2, 0.22),
                albedo=(0.85, 0.7, 0.2),
                start=(1.9, -0.45, 0.22),
                velocity=(-0.19, 0.0, 0.0),
            ),
        ],
        tex_mode=kernels.TEX_CHECKER,
        tex_scale=1.1,
        plane_c0=(0.75, 0.73, 0.7),
        plane_c1=(0.45, 0.47, 0.5),
    )


BUILTIN_SPECS = {
    "orbit-sphere": orbit_sphere_spec,
    "street-toy": street_toy_spec,
}
