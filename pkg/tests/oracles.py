"""Independent reference implementations used to check the package.

Nothing here imports lunagen's numerical code: the Hapke values were
evaluated with mpmath at 30 digits before the package existed, and the
terrain marcher re-derives the heightfield from the raw height array.
"""

import math

import numpy as np

# r(w=1, b=0, B0=0, mu0=mu=1, g=0): H(1) = 3, bracket 1 + 9 - 1 = 9, r = 9/(8 pi)
HAPKE_UNIT_ALBEDO = 0.358098621956764505479988467588
# r(w=0.11, b=-0.4, B0=1, h=0.06, mu0=0.8, mu=0.6, g=0.5)
HAPKE_LUNAR_DEFAULTS = 0.0164841929989587641400943014163


def hapke_scalar(w, b, B0, h, mu0, mu, g):
    """Straight transcription of the closed form in plain floats."""
    def H(x):
        return (1 + 2 * x) / (1 + 2 * x * math.sqrt(1 - w))
    P = (1 - b * b) / (1 + 2 * b * math.cos(g) + b * b) ** 1.5
    B = B0 / (1 + math.tan(g / 2) / h)
    return w / (4 * math.pi) * mu0 / (mu0 + mu) * ((1 + B) * P + H(mu0) * H(mu) - 1)


def _bilinear(H, x0, y0, cs, x, y):
    gx = (x - x0) / cs
    gy = (y0 - y) / cs
    nr, nc = H.shape
    c = np.clip(np.floor(gx).astype(int), 0, nc - 2)
    r = np.clip(np.floor(gy).astype(int), 0, nr - 2)
    fx, fy = gx - c, gy - r
    return ((1 - fx) * (1 - fy) * H[r, c] + fx * (1 - fy) * H[r, c + 1]
            + (1 - fx) * fy * H[r + 1, c] + fx * fy * H[r + 1, c + 1])


def march_terrain(H, x0, y0, cs, origins, dirs, step_frac=1 / 8, t_max=None, bisections=40):
    """Fixed-step terrain intersection for many rays; inf where nothing is hit.

    Each ray is clipped to the grid's footprint, sampled every
    ``step_frac * cs`` metres, and the first sign change of
    ``z - h(x, y)`` is refined by bisection. A ray already below the surface
    where it enters the footprint hits at the entry point.
    """
    nr, nc = H.shape
    xmin, xmax = x0, x0 + (nc - 1) * cs
    ymin, ymax = y0 - (nr - 1) * cs, y0
    o = np.asarray(origins, float)
    d = np.asarray(dirs, float)
    n = len(o)
    t0 = np.zeros(n)
    t1 = np.full(n, np.inf if t_max is None else t_max)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k, (lo, hi) in enumerate(((xmin, xmax), (ymin, ymax))):
            inv = 1.0 / d[:, k]
            a = (lo - o[:, k]) * inv
            b = (hi - o[:, k]) * inv
            par = d[:, k] == 0
            inside = (o[:, k] >= lo) & (o[:, k] <= hi)
            a = np.where(par, np.where(inside, -np.inf, np.inf), a)
            b = np.where(par, np.where(inside, np.inf, -np.inf), b)
            t0 = np.maximum(t0, np.minimum(a, b))
            t1 = np.minimum(t1, np.maximum(a, b))
    # stop once the ray is below the lowest terrain and still descending
    hmin = H.min()
    with np.errstate(divide="ignore", invalid="ignore"):
        t_floor = np.where(d[:, 2] < 0, (hmin - 1e-9 - o[:, 2]) / d[:, 2], np.inf)
    t1 = np.minimum(t1, np.maximum(t_floor, t0))
    result = np.full(n, np.inf)
    active = t0 <= t1

    def f(idx, t):
        p = o[idx] + t[:, None] * d[idx]
        return p[:, 2] - _bilinear(H, x0, y0, cs, p[:, 0], p[:, 1])

    idx = np.nonzero(active)[0]
    below = f(idx, t0[idx]) <= 0
    result[idx[below]] = t0[idx[below]]
    idx = idx[~below]
    step = step_frac * cs
    t_prev = t0[idx].copy()
    while idx.size:
        t_next = np.minimum(t_prev + step, t1[idx])
        hit = f(idx, t_next) <= 0
        if hit.any():
            lo, hi = t_prev[hit].copy(), t_next[hit].copy()
            sub = idx[hit]
            for _ in range(bisections):
                mid = 0.5 * (lo + hi)
                under = f(sub, mid) <= 0
                hi = np.where(under, mid, hi)
                lo = np.where(under, lo, mid)
            result[sub] = hi
        done = hit | (t_next >= t1[idx])
        idx, t_prev = idx[~done], t_next[~done]
    return result


def hit_hemispheres(centers, base_heights, radii, origins, dirs):
    """Nearest entry into any upper hemisphere (z >= base height); inf on miss."""
    o = np.asarray(origins, float)[:, None, :]
    d = np.asarray(dirs, float)[:, None, :]
    c = np.column_stack([centers, base_heights])[None, :, :]
    oc = o - c
    b = np.sum(oc * d, axis=-1)
    cc = np.sum(oc * oc, axis=-1) - np.asarray(radii)[None, :] ** 2
    disc = b * b - cc
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(disc)
    z = o[..., 2] + t * d[..., 2]
    ok = (disc >= 0) & (t > 0) & (z >= c[..., 2])
    t = np.where(ok, t, np.inf)
    return t.min(axis=1) if t.shape[1] else np.full(len(o), np.inf)
