"""Ray/primitive intersection kernels for the synthetic scene generator.

Two interchangeable implementations: a numba ``@njit`` per-ray loop and a
vectorized pure-numpy fallback. The numpy path is selected by setting the
environment variable ``DECOMPNERF_NUMBA=0`` (or when numba is unavailable).
Both compute the same per-element formulas; ``benchmarks/bench_kernels.py``
compares their throughput.

Scene layout passed in flat arrays: one ground plane (z = plane_z) with a
procedural texture, plus spheres and axis-aligned boxes. Hit ids: -1 sky,
0 plane, 1..S spheres, S+1..S+B boxes.
"""

from __future__ import annotations

import os

import numpy as np

_ENV = os.environ.get("DECOMPNERF_NUMBA", "1").strip().lower()
_WANT_NUMBA = _ENV not in ("0", "false", "off", "no")

if _WANT_NUMBA:
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _HAVE_NUMBA = False
else:
    _HAVE_NUMBA = False


def numba_enabled():
    return _HAVE_NUMBA


_T_MIN = 1e-6

TEX_CHECKER = 0
TEX_SMOOTH = 1


def _trace_loop(
    origins,
    dirs,
    plane_z,
    tex_mode,
    tex_scale,
    plane_c0,
    plane_c1,
    sph_c,
    sph_r,
    sph_alb,
    box_min,
    box_max,
    box_alb,
    light,
    ambient,
    sky,
    t_max,
    color,
    depth,
    hit_id,
):
    n = origins.shape[0]
    n_sph = sph_r.shape[0]
    n_box = box_min.shape[0]
    for i in range(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        best_t = t_max
        best_id = -1
        nx = 0.0
        ny = 0.0
        nz = 0.0

        # ground plane z = plane_z, normal +z
        if abs(dz) > 1e-12:
            t = (plane_z - oz) / dz
            if _T_MIN < t < best_t:
                best_t = t
                best_id = 0
                nx, ny, nz = 0.0, 0.0, 1.0

        # spheres
        for s in range(n_sph):
            cx = sph_c[s, 0]
            cy = sph_c[s, 1]
            cz = sph_c[s, 2]
            r = sph_r[s]
            lx = ox - cx
            ly = oy - cy
            lz = oz - cz
            b = lx * dx + ly * dy + lz * dz
            c = lx * lx + ly * ly + lz * lz - r * r
            disc = b * b - c
            if disc > 0.0:
                sq = np.sqrt(disc)
                t = -b - sq
                if t <= _T_MIN:
                    t = -b + sq
                if _T_MIN < t < best_t:
                    best_t = t
                    best_id = 1 + s
                    px = ox + t * dx
                    py = oy + t * dy
                    pz = oz + t * dz
                    nx = (px - cx) / r
                    ny = (py - cy) / r
                    nz = (pz - cz) / r

        # axis-aligned boxes (slab method)
        for bi in range(n_box):
            t_near = -1e30
            t_far = 1e30
            axis = -1
            sign = 1.0
            ok = True
            for a in range(3):
                o_a = origins[i, a]
                d_a = dirs[i, a]
                lo = box_min[bi, a]
                hi = box_max[bi, a]
                if abs(d_a) < 1e-12:
                    if o_a < lo or o_a > hi:
                        ok = False
                        break
                else:
                    t0 = (lo - o_a) / d_a
                    t1 = (hi - o_a) / d_a
                    sgn = -1.0
                    if t0 > t1:
                        t0, t1 = t1, t0
                        sgn = 1.0
                    if t0 > t_near:
                        t_near = t0
                        axis = a
                        sign = sgn
                    if t1 < t_far:
                        t_far = t1
                    if t_near > t_far:
                        ok = False
                        break
            if ok and t_near > _T_MIN and t_near < best_t:
                best_t = t_near
                best_id = 1 + n_sph + bi
                nx, ny, nz = 0.0, 0.0, 0.0
                if axis == 0:
                    nx = sign
                elif axis == 1:
                    ny = sign
                else:
                    nz = sign

        if best_id < 0:
            color[i, 0] = sky[0]
            color[i, 1] = sky[1]
            color[i, 2] = sky[2]
            depth[i] = t_max
            hit_id[i] = -1
            continue

        px = ox + best_t * dx
        py = oy + best_t * dy
        pz = oz + best_t * dz
        if best_id == 0:
            if tex_mode == TEX_CHECKER:
                k = (np.floor(px / tex_scale) + np.floor(py / tex_scale)) % 2.0
                w = k
            else:
                w = 0.5 + 0.25 * np.sin(2.0 * np.pi * px / tex_scale) + 0.25 * np.sin(
                    2.0 * np.pi * py / tex_scale
                )
            ax = plane_c0[0] * (1.0 - w) + plane_c1[0] * w
            ay = plane_c0[1] * (1.0 - w) + plane_c1[1] * w
            az = plane_c0[2] * (1.0 - w) + plane_c1[2] * w
        elif best_id <= n_sph:
            ax = sph_alb[best_id - 1, 0]
            ay = sph_alb[best_id - 1, 1]
            az = sph_alb[best_id - 1, 2]
        else:
            ax = box_alb[best_id - 1 - n_sph, 0]
            ay = box_alb[best_id - 1 - n_sph, 1]
            az = box_alb[best_id - 1 - n_sph, 2]

        lam = nx * light[0] + ny * light[1] + nz * light[2]
        if lam < 0.0:
            lam = 0.0
        shade = ambient + (1.0 - ambient) * lam
        color[i, 0] = ax * shade
        color[i, 1] = ay * shade
        color[i, 2] = az * shade
        depth[i] = best_t
        hit_id[i] = best_id


if _HAVE_NUMBA:
    _trace_loop_jit = njit(cache=True)(_trace_loop)


def _trace_numpy(
    origins,
    dirs,
    plane_z,
    tex_mode,
    tex_scale,
    plane_c0,
    plane_c1,
    sph_c,
    sph_r,
    sph_alb,
    box_min,
    box_max,
    box_alb,
    light,
    ambient,
    sky,
    t_max,
):
    n = origins.shape[0]
    best_t = np.full(n, t_max)
    best_id = np.full(n, -1, dtype=np.int64)
    normal = np.zeros((n, 3))

    # plane
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane_z - origins[:, 2]) / dz
    hit = (np.abs(dz) > 1e-12) & (t > _T_MIN) & (t < best_t)
    best_t[hit] = t[hit]
    best_id[hit] = 0
    normal[hit] = (0.0, 0.0, 1.0)

    # spheres
    for s in range(sph_r.shape[0]):
        rel = origins - sph_c[s]
        b = (rel * dirs).sum(axis=1)
        c = (rel * rel).sum(axis=1) - sph_r[s] ** 2
        disc = b * b - c
        pos = disc > 0.0
        sq = np.sqrt(np.where(pos, disc, 0.0))
        t = -b - sq
        t = np.where(t <= _T_MIN, -b + sq, t)
        hit = pos & (t > _T_MIN) & (t < best_t)
        best_t[hit] = t[hit]
        best_id[hit] = 1 + s
        p = origins[hit] + t[hit, None] * dirs[hit]
        normal[hit] = (p - sph_c[s]) / sph_r[s]

    # boxes
    n_sph = sph_r.shape[0]
    for bi in range(box_min.shape[0]):
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (box_min[bi] - origins) / dirs
            t1 = (box_max[bi] - origins) / dirs
        parallel = np.abs(dirs) < 1e-12
        inside = (origins >= box_min[bi]) & (origins <= box_max[bi])
        t_lo = np.where(parallel, -1e30, np.minimum(t0, t1))
        t_hi = np.where(parallel, 1e30, np.maximum(t0, t1))
        miss_par = (parallel & ~inside).any(axis=1)
        axis = np.argmax(t_lo, axis=1)
        t_near = t_lo[np.arange(origins.shape[0]), axis]
        t_far = t_hi.min(axis=1)
        # sign of the entry-face normal: +1 when the ray enters through the
        # max slab (descending t0>t1 in the loop version), else -1
        d_ax = dirs[np.arange(origins.shape[0]), axis]
        sign = np.where(d_ax < 0.0, 1.0, -1.0)
        hit = (~miss_par) & (t_near <= t_far) & (t_near > _T_MIN) & (t_near < best_t)
        best_t[hit] = t_near[hit]
        best_id[hit] = 1 + n_sph + bi
        nrm = np.zeros((int(hit.sum()), 3))
        nrm[np.arange(nrm.shape[0]), axis[hit]] = sign[hit]
        normal[hit] = nrm

    # shading
    p = origins + best_t[:, None] * dirs
    albedo = np.empty((n, 3))
    albedo[:] = sky
    on_plane = best_id == 0
    if on_plane.any():
        px, py = p[on_plane, 0], p[on_plane, 1]
        if tex_mode == TEX_CHECKER:
            w = (np.floor(px / tex_scale) + np.floor(py / tex_scale)) % 2.0
        else:
            w = (
                0.5
                + 0.25 * np.sin(2.0 * np.pi * px / tex_scale)
                + 0.25 * np.sin(2.0 * np.pi * py / tex_scale)
            )
        albedo[on_plane] = plane_c0 * (1.0 - w[:, None]) + plane_c1 * w[:, None]
    for s in range(n_sph):
        albedo[best_id == 1 + s] = sph_alb[s]
    for bi in range(box_min.shape[0]):
        albedo[best_id == 1 + n_sph + bi] = box_alb[bi]

    lam = np.maximum(0.0, normal @ light)
    shade = ambient + (1.0 - ambient) * lam
    color = albedo * shade[:, None]
    missed = best_id == -1
    color[missed] = sky
    depth = np.where(missed, t_max, best_t)
    return color, depth, best_id


def trace_rays(
    origins,
    dirs,
    plane_z,
    tex_mode,
    tex_scale,
    plane_c0,
    plane_c1,
    sph_c,
    sph_r,
    sph_alb,
    box_min,
    box_max,
    box_alb,
    light,
    ambient,
    sky,
    t_max,
    force=None,
):
    """Trace rays against the flat scene description.

    Returns (color (N,3), depth (N,), hit_id (N,)). ``force`` overrides the
    env-selected backend with 'numba' or 'numpy' (used by tests/benchmarks).
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    args = (
        np.asarray(plane_c0, dtype=np.float64),
        np.asarray(plane_c1, dtype=np.float64),
        np.ascontiguousarray(sph_c, dtype=np.float64).reshape(-1, 3),
        np.ascontiguousarray(sph_r, dtype=np.float64).reshape(-1),
        np.ascontiguousarray(sph_alb, dtype=np.float64).reshape(-1, 3),
        np.ascontiguousarray(box_min, dtype=np.float64).reshape(-1, 3),
        np.ascontiguousarray(box_max, dtype=np.float64).reshape(-1, 3),
        np.ascontiguousarray(box_alb, dtype=np.float64).reshape(-1, 3),
        np.asarray(light, dtype=np.float64),
        float(ambient),
        np.asarray(sky, dtype=np.float64),
        float(t_max),
    )
    use_numba = _HAVE_NUMBA if force is None else (force == "numba")
    if use_numba and not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    if use_numba:
        n = origins.shape[0]
        color = np.empty((n, 3))
        depth = np.empty(n)
        hit_id = np.empty(n, dtype=np.int64)
        _trace_loop_jit(
            origins,
            dirs,
            float(plane_z),
            int(tex_mode),
            float(tex_scale),
            *args[:9],
            args[9],
            args[10],
            args[11],
            color,
            depth,
            hit_id,
        )
        return color, depth, hit_id
    return _trace_numpy(
        origins, dirs, float(plane_z), int(tex_mode), float(tex_scale), *args
    )
