"""Jitted ray-casting kernels.

The terrain surface is the bilinear interpolant of the DEM cell centres. Work
happens in grid coordinates ``gx = (x - x0) / cs``, ``gy = (y0 - y) / cs``
(heights stay in metres), so patch ``(i, j)`` spans ``[j, j+1] x [i, i+1]``.

Acceleration is a max-mipmap over patches: level 0 holds the maximum of each
patch's four corners and of any boulder top whose footprint touches it; level
``L`` holds the max of its 2x2 children. Boulders are registered per patch in
a CSR table so the leaf test sees both kinds of geometry in ray order.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numba
import numpy as np
from numba import prange

from ..rng import jit_hash_extend, jit_hash_prefix, jit_unit
from .hapke import hapke_jit_cos

MISS = -2
TERRAIN = -1
MU_EPS = 1e-6
TILE = 16


class SceneArrays(NamedTuple):
    H: np.ndarray
    x0: float
    y0: float
    cs: float
    mip: np.ndarray
    lrows: np.ndarray
    lcols: np.ndarray
    loff: np.ndarray
    bx: np.ndarray
    by: np.ndarray
    bz: np.ndarray
    br: np.ndarray
    pstart: np.ndarray
    pitems: np.ndarray
    tex: np.ndarray
    has_tex: bool
    hapke: np.ndarray  # w, b, B0, h
    black: bool
    sun: np.ndarray
    irradiance: float
    shadow_eps: float


def build_mipmap(H: np.ndarray, boulder_patches: list[tuple[int, int, float]]):
    """Flattened max-mipmap levels plus their shapes and offsets."""
    lvl = np.maximum(np.maximum(H[:-1, :-1], H[:-1, 1:]), np.maximum(H[1:, :-1], H[1:, 1:]))
    for i, j, top in boulder_patches:
        if top > lvl[i, j]:
            lvl[i, j] = top
    levels = [lvl]
    while lvl.shape[0] > 1 or lvl.shape[1] > 1:
        r, c = lvl.shape
        pad = np.full((r + r % 2, c + c % 2), -np.inf)
        pad[:r, :c] = lvl
        lvl = pad.reshape(pad.shape[0] // 2, 2, pad.shape[1] // 2, 2).max(axis=(1, 3))
        levels.append(lvl)
    lrows = np.array([l.shape[0] for l in levels], dtype=np.int64)
    lcols = np.array([l.shape[1] for l in levels], dtype=np.int64)
    loff = np.concatenate([[0], np.cumsum(lrows * lcols)[:-1]]).astype(np.int64)
    return np.concatenate([l.ravel() for l in levels]), lrows, lcols, loff


# ---------------------------------------------------------------------------
# Scalar helpers
# ---------------------------------------------------------------------------

@numba.njit(cache=True, error_model="numpy", inline="always")
def _bilin(H, gx, gy):
    nrows, ncols = H.shape
    gx = min(max(gx, 0.0), ncols - 1.0)
    gy = min(max(gy, 0.0), nrows - 1.0)
    c0 = min(int(math.floor(gx)), ncols - 2)
    r0 = min(int(math.floor(gy)), nrows - 2)
    fx = gx - c0
    fy = gy - r0
    top = H[r0, c0] * (1.0 - fx) + H[r0, c0 + 1] * fx
    bot = H[r0 + 1, c0] * (1.0 - fx) + H[r0 + 1, c0 + 1] * fx
    return top * (1.0 - fy) + bot * fy


@numba.njit(cache=True, error_model="numpy")
def terrain_height(S, x, y):
    return _bilin(S.H, (x - S.x0) / S.cs, (S.y0 - y) / S.cs)


@numba.njit(cache=True, error_model="numpy", inline="always")
def shading_normal(S, x, y):
    """Central-difference normal with a one-cell step (one-sided at borders)."""
    H = S.H
    nrows, ncols = H.shape
    gx = (x - S.x0) / S.cs
    gy = (S.y0 - y) / S.cs
    xp = min(gx + 1.0, ncols - 1.0)
    xm = max(gx - 1.0, 0.0)
    yp = min(gy + 1.0, nrows - 1.0)
    ym = max(gy - 1.0, 0.0)
    dgx = (_bilin(H, xp, gy) - _bilin(H, xm, gy)) / (xp - xm)
    dgy = (_bilin(H, gx, yp) - _bilin(H, gx, ym)) / (yp - ym)
    nx = -dgx / S.cs
    ny = dgy / S.cs  # y grows opposite to gy
    inv = 1.0 / math.sqrt(nx * nx + ny * ny + 1.0)
    return nx * inv, ny * inv, inv


@numba.njit(cache=True, error_model="numpy", inline="always")
def patch_normal(S, x, y):
    """Exact normal of the bilinear patch containing (x, y)."""
    H = S.H
    nrows, ncols = H.shape
    gx = min(max((x - S.x0) / S.cs, 0.0), ncols - 1.0)
    gy = min(max((S.y0 - y) / S.cs, 0.0), nrows - 1.0)
    j = min(int(math.floor(gx)), ncols - 2)
    i = min(int(math.floor(gy)), nrows - 2)
    u = gx - j
    v = gy - i
    h00 = H[i, j]
    B = H[i, j + 1] - h00
    C = H[i + 1, j] - h00
    D = h00 - H[i, j + 1] - H[i + 1, j] + H[i + 1, j + 1]
    nx = -(B + D * v) / S.cs
    ny = (C + D * u) / S.cs
    inv = 1.0 / math.sqrt(nx * nx + ny * ny + 1.0)
    return nx * inv, ny * inv, inv


@numba.njit(cache=True, error_model="numpy", inline="always")
def _patch_hit(H, i, j, u0, v0, z0, a, b, dz, smax):
    """Smallest s in [0, smax] where the ray meets the bilinear patch, or -1.

    (u0, v0, z0) is the ray point at the patch interval start in patch-local
    grid coordinates; (a, b, dz) the per-metre direction.
    """
    h00 = H[i, j]
    B = H[i, j + 1] - h00
    C = H[i + 1, j] - h00
    D = h00 - H[i, j + 1] - H[i + 1, j] + H[i + 1, j + 1]
    c0 = z0 - (h00 + B * u0 + C * v0 + D * u0 * v0)
    if c0 <= 0.0:
        return 0.0
    c1 = dz - B * a - C * b - D * (u0 * b + v0 * a)
    c2 = -D * a * b
    fend = c0 + smax * (c1 + smax * c2)
    best = -1.0
    if abs(c2) < 1e-14 * (abs(c1) + abs(c0) / max(smax, 1e-300)):
        if c1 < 0.0:
            s = -c0 / c1
            if s <= smax:
                best = s
    else:
        disc = c1 * c1 - 4.0 * c2 * c0
        if disc >= 0.0:
            sq = math.sqrt(disc)
            q = -0.5 * (c1 + sq) if c1 >= 0.0 else -0.5 * (c1 - sq)
            r1 = q / c2
            r2 = c0 / q if q != 0.0 else -1.0
            if r1 > r2:
                r1, r2 = r2, r1
            if 0.0 <= r1 <= smax:
                best = r1
            elif 0.0 <= r2 <= smax:
                best = r2
    if best < 0.0 and fend <= 0.0:
        # rounding lost the root; bracket is valid, bisect it
        lo, hi = 0.0, smax
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if c0 + mid * (c1 + mid * c2) > 0.0:
                lo = mid
            else:
                hi = mid
        best = hi
    return best


@numba.njit(cache=True, error_model="numpy", inline="always")
def _sphere_hit(ox, oy, oz, dx, dy, dz, cx, cy, cz, r):
    px, py, pz = ox - cx, oy - cy, oz - cz
    b = px * dx + py * dy + pz * dz
    c = px * px + py * py + pz * pz - r * r
    disc = b * b - c
    if disc < 0.0:
        return -1.0
    t = -b - math.sqrt(disc)
    if oz + t * dz < cz:
        return -1.0
    return t


@numba.njit(cache=True, error_model="numpy")
def trace(S, ox, oy, oz, dx, dy, dz, tmin, tmax):
    """Nearest hit along a unit-direction ray: returns (t, object)."""
    H = S.H
    nrows, ncols = H.shape
    cs = S.cs
    gox = (ox - S.x0) / cs
    goy = (S.y0 - oy) / cs
    gdx = dx / cs
    gdy = -dy / cs
    t0 = tmin
    t1 = tmax
    # clip to the grid's xy box
    if gdx == 0.0:
        if gox < 0.0 or gox > ncols - 1.0:
            return math.inf, MISS
    else:
        ta = -gox / gdx
        tb = (ncols - 1.0 - gox) / gdx
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    if gdy == 0.0:
        if goy < 0.0 or goy > nrows - 1.0:
            return math.inf, MISS
    else:
        ta = -goy / gdy
        tb = (nrows - 1.0 - goy) / gdy
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    nlev = S.lrows.shape[0]
    top = nlev - 1
    zmax = S.mip[S.loff[top]]
    if dz > 0.0:
        t1 = min(t1, (zmax - oz) / dz)
    elif dz < 0.0:
        t0 = max(t0, (zmax - oz) / dz)
    elif oz > zmax:
        return math.inf, MISS
    if t0 > t1:
        return math.inf, MISS

    mip = S.mip
    loff = S.loff
    lcols = S.lcols
    lrows = S.lrows
    ix = 1.0 / gdx if gdx != 0.0 else 0.0
    iy = 1.0 / gdy if gdy != 0.0 else 0.0
    xlast = ncols - 1.0
    ylast = nrows - 1.0
    t = t0
    L = top
    while t <= t1:
        tq = t + 1e-9 * (1.0 + abs(t))
        px = gox + tq * gdx
        py = goy + tq * gdy
        size = float(1 << L)
        inv = 1.0 / size
        j = min(max(int(math.floor(px * inv)), 0), lcols[L] - 1)
        i = min(max(int(math.floor(py * inv)), 0), lrows[L] - 1)
        tx = t1
        if gdx > 0.0:
            tx = min(tx, (min((j + 1) * size, xlast) - gox) * ix)
        elif gdx < 0.0:
            tx = min(tx, (j * size - gox) * ix)
        if gdy > 0.0:
            tx = min(tx, (min((i + 1) * size, ylast) - goy) * iy)
        elif gdy < 0.0:
            tx = min(tx, (i * size - goy) * iy)
        if tx < t:
            tx = t
        zlo = min(oz + t * dz, oz + tx * dz)
        if zlo > mip[loff[L] + i * lcols[L] + j]:
            t = tx + 1e-9 * (1.0 + abs(tx))
            if L < top:
                L += 1
            continue
        if L > 0:
            L -= 1
            continue
        best = math.inf
        obj = MISS
        s = _patch_hit(H, i, j, gox + t * gdx - j, goy + t * gdy - i, oz + t * dz,
                       gdx, gdy, dz, tx - t)
        if s >= 0.0:
            best = t + s
            obj = TERRAIN
        tol = 1e-7 * (1.0 + abs(tx))
        k = i * (ncols - 1) + j
        for q in range(S.pstart[k], S.pstart[k + 1]):
            m = S.pitems[q]
            tsph = _sphere_hit(ox, oy, oz, dx, dy, dz, S.bx[m], S.by[m], S.bz[m], S.br[m])
            if tsph >= tmin and tsph >= t - tol and tsph <= tx + tol and tsph < best:
                best = tsph
                obj = m
        if obj != MISS:
            return best, obj
        t = tx + 1e-9 * (1.0 + abs(tx))
        if top > 0:
            L = 1
    return math.inf, MISS


@numba.njit(cache=True, error_model="numpy", inline="always")
def hit_normals(S, x, y, z, obj):
    """(shading normal, geometric normal) at a hit point."""
    if obj >= 0:
        r = S.br[obj]
        nx = (x - S.bx[obj]) / r
        ny = (y - S.by[obj]) / r
        nz = (z - S.bz[obj]) / r
        inv = 1.0 / math.sqrt(nx * nx + ny * ny + nz * nz)
        nx *= inv
        ny *= inv
        nz *= inv
        return nx, ny, nz, nx, ny, nz
    sx, sy, sz = shading_normal(S, x, y)
    gx, gy, gz = patch_normal(S, x, y)
    return sx, sy, sz, gx, gy, gz


@numba.njit(cache=True, error_model="numpy", inline="always")
def albedo_at(S, x, y):
    if not S.has_tex:
        return 1.0
    nrows, ncols = S.tex.shape
    c = int(math.floor((x - S.x0) / S.cs + 0.5))
    r = int(math.floor((S.y0 - y) / S.cs + 0.5))
    c = min(max(c, 0), ncols - 1)
    r = min(max(r, 0), nrows - 1)
    return S.tex[r, c]


@numba.njit(cache=True, error_model="numpy", inline="always")
def shade_geometry(S, x, y, z, obj, dx, dy, dz, shadows):
    """Returns (mu0, mu, cos of phase angle, lit) for a hit seen along direction d."""
    snx, sny, snz, gnx, gny, gnz = hit_normals(S, x, y, z, obj)
    sun = S.sun
    mu0 = snx * sun[0] + sny * sun[1] + snz * sun[2]
    mu = max(MU_EPS, -(snx * dx + sny * dy + snz * dz))
    mu = min(mu, 1.0)
    cosg = min(1.0, max(-1.0, -(sun[0] * dx + sun[1] * dy + sun[2] * dz)))
    if mu0 <= 0.0:
        return 0.0, mu, cosg, False
    mu0 = min(mu0, 1.0)
    if shadows:
        e = S.shadow_eps
        ts, _ = trace(S, x + e * gnx, y + e * gny, z + e * gnz, sun[0], sun[1], sun[2],
                      0.0, math.inf)
        if ts < math.inf:
            return mu0, mu, cosg, False
    return mu0, mu, cosg, True


@numba.njit(cache=True, error_model="numpy", inline="always")
def radiance_sample(S, ox, oy, oz, dx, dy, dz, shadows):
    """(radiance, hit distance) for one primary ray."""
    t, obj = trace(S, ox, oy, oz, dx, dy, dz, 0.0, math.inf)
    if obj == MISS:
        return 0.0, math.inf
    x = ox + t * dx
    y = oy + t * dy
    z = oz + t * dz
    mu0, mu, cosg, lit = shade_geometry(S, x, y, z, obj, dx, dy, dz, shadows)
    if not lit or S.black:
        return 0.0, t
    hp = S.hapke
    r = hapke_jit_cos(hp[0], hp[1], hp[2], hp[3], mu0, mu, cosg)
    return S.irradiance * r * albedo_at(S, x, y), t


@numba.njit(cache=True, error_model="numpy", inline="always")
def _sample_offset(n, k, hpix):
    """Jittered offset of sample k; ``hpix`` is the pixel's hash prefix."""
    if n == 1:
        return 0.0, 0.0
    a = k % n
    b = k // n
    ju = jit_unit(jit_hash_extend(hpix, 2 * k))
    jv = jit_unit(jit_hash_extend(hpix, 2 * k + 1))
    return (a + ju) / n - 0.5, (b + jv) / n - 0.5


@numba.njit(cache=True, error_model="numpy", inline="always")
def _camera_ray(R, fx, fy, cx, cy, u, v):
    xc = (u - cx) / fx
    yc = (v - cy) / fy
    inv = 1.0 / math.sqrt(xc * xc + yc * yc + 1.0)
    xc *= inv
    yc *= inv
    zc = inv
    dx = R[0, 0] * xc + R[0, 1] * yc + R[0, 2] * zc
    dy = R[1, 0] * xc + R[1, 1] * yc + R[1, 2] * zc
    dz = R[2, 0] * xc + R[2, 1] * yc + R[2, 2] * zc
    return dx, dy, dz, zc


@numba.njit(cache=True, error_model="numpy", parallel=True)
def render_kernel(S, intr, R, pos, n, shadows, seed, frame, radiance, depth):
    """Fill ``radiance`` (mean of n*n jittered samples) and ``depth`` (z-depth
    of the pixel-centre ray, +inf on miss). Tiles are independent."""
    Hh, W = radiance.shape
    fx, fy, cx, cy = intr[0], intr[1], intr[2], intr[3]
    ox, oy, oz = pos[0], pos[1], pos[2]
    tx = (W + TILE - 1) // TILE
    ty = (Hh + TILE - 1) // TILE
    nn = n * n
    for tile in prange(tx * ty):
        r0 = (tile // tx) * TILE
        c0 = (tile % tx) * TILE
        for py in range(r0, min(r0 + TILE, Hh)):
            for px in range(c0, min(c0 + TILE, W)):
                acc = 0.0
                t = math.inf
                hpix = jit_hash_prefix(seed, frame, px, py)
                for k in range(nn):
                    su, sv = _sample_offset(n, k, hpix)
                    dx, dy, dz, _ = _camera_ray(R, fx, fy, cx, cy, px + su, py + sv)
                    L, t = radiance_sample(S, ox, oy, oz, dx, dy, dz, shadows)
                    acc += L
                radiance[py, px] = acc / nn
                dx, dy, dz, zc = _camera_ray(R, fx, fy, cx, cy, float(px), float(py))
                if n > 1:  # with n == 1 the single sample is the centre ray
                    t, _ = trace(S, ox, oy, oz, dx, dy, dz, 0.0, math.inf)
                depth[py, px] = t * zc if t < math.inf else math.inf


@numba.njit(cache=True, error_model="numpy", parallel=True)
def gbuffer_kernel(S, intr, R, pos, n, shadows, seed, frame,
                   mu0_out, mu_out, g_out, lit_out, alb_out, obj_out, texel_out):
    """Per-sample shading geometry, laid out (H, W, n*n)."""
    Hh, W, nn = mu0_out.shape
    fx, fy, cx, cy = intr[0], intr[1], intr[2], intr[3]
    ox, oy, oz = pos[0], pos[1], pos[2]
    nrows, ncols = S.H.shape
    for py in prange(Hh):
        for px in range(W):
            hpix = jit_hash_prefix(seed, frame, px, py)
            for k in range(nn):
                su, sv = _sample_offset(n, k, hpix)
                dx, dy, dz, _ = _camera_ray(R, fx, fy, cx, cy, px + su, py + sv)
                t, obj = trace(S, ox, oy, oz, dx, dy, dz, 0.0, math.inf)
                obj_out[py, px, k] = obj
                if obj == MISS:
                    mu0_out[py, px, k] = 0.0
                    mu_out[py, px, k] = 1.0
                    g_out[py, px, k] = 0.0
                    lit_out[py, px, k] = False
                    alb_out[py, px, k] = 0.0
                    texel_out[py, px, k] = -1
                    continue
                x = ox + t * dx
                y = oy + t * dy
                z = oz + t * dz
                mu0, mu, cosg, lit = shade_geometry(S, x, y, z, obj, dx, dy, dz, shadows)
                mu0_out[py, px, k] = mu0
                mu_out[py, px, k] = mu
                g_out[py, px, k] = math.acos(cosg)
                lit_out[py, px, k] = lit
                alb_out[py, px, k] = albedo_at(S, x, y)
                c = min(max(int(math.floor((x - S.x0) / S.cs + 0.5)), 0), ncols - 1)
                r = min(max(int(math.floor((S.y0 - y) / S.cs + 0.5)), 0), nrows - 1)
                texel_out[py, px, k] = r * ncols + c


@numba.njit(cache=True, error_model="numpy", parallel=True)
def trace_many(S, origins, dirs, t_out, obj_out):
    for k in prange(origins.shape[0]):
        t, obj = trace(S, origins[k, 0], origins[k, 1], origins[k, 2],
                       dirs[k, 0], dirs[k, 1], dirs[k, 2], 0.0, math.inf)
        t_out[k] = t
        obj_out[k] = obj
