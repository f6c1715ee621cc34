"""Procedural terrain detail: craters, boulders and fractal Perlin noise.

Randomness is counter-based (see :mod:`lunagen.rng`): feature ``i`` draws from
``hash(seed, stream, i, k)``, so a field is identical however it is generated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dem import DemGrid
from .rng import hash_u64, uniform

_COUNT, _CENTER_X, _CENTER_Y, _RADIUS = 0, 1, 2, 3

DEPTH_RATIO = 0.2  # depth / radius (depth / diameter = 0.1)
RIM_RATIO = 0.04
RIM_CUTOFF = 3.0  # rims vanish beyond 3 radii


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class CraterField:
    centers: np.ndarray  # (n, 2)
    radii: np.ndarray
    depths: np.ndarray
    rim_heights: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        r, d, h = (np.asarray(a, dtype=float).reshape(-1)
                   for a in (self.radii, self.depths, self.rim_heights))
        if not (len(c) == len(r) == len(d) == len(h)):
            raise FeatureError("crater attribute lengths differ")
        if np.any(r <= 0) or np.any(d <= 0) or np.any(h < 0):
            raise FeatureError("craters need radius > 0, depth > 0, rim_height >= 0")
        for name, a in (("centers", c), ("radii", r), ("depths", d), ("rim_heights", h)):
            object.__setattr__(self, name, a)

    def __len__(self):
        return len(self.radii)

    @classmethod
    def empty(cls) -> "CraterField":
        return cls(np.zeros((0, 2)), [], [], [])

    def to_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "radii": self.radii.tolist(),
                "depths": self.depths.tolist(), "rim_heights": self.rim_heights.tolist()}

    @classmethod
    def from_dict(cls, d) -> "CraterField":
        return cls(np.array(d["centers"], dtype=float).reshape(-1, 2), d["radii"],
                   d["depths"], d["rim_heights"])


@dataclass(frozen=True)
class BoulderField:
    centers: np.ndarray  # (n, 2)
    radii: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        r = np.asarray(self.radii, dtype=float).reshape(-1)
        if len(c) != len(r):
            raise FeatureError("boulder attribute lengths differ")
        if np.any(r <= 0):
            raise FeatureError("boulder radius must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)

    def __len__(self):
        return len(self.radii)

    @classmethod
    def empty(cls) -> "BoulderField":
        return cls(np.zeros((0, 2)), [])

    def to_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "radii": self.radii.tolist()}

    @classmethod
    def from_dict(cls, d) -> "BoulderField":
        return cls(np.array(d["centers"], dtype=float).reshape(-1, 2), d["radii"])


@dataclass(frozen=True)
class NoiseSpec:
    amplitude: float
    base_wavelength: float
    octaves: int = 4
    persistence: float = 0.5
    lacunarity: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.amplitude < 0 or not self.base_wavelength > 0:
            raise FeatureError("need amplitude >= 0 and base_wavelength > 0")
        if self.octaves < 1:
            raise FeatureError("octaves must be >= 1")
        if not 0 < self.persistence < 1:
            raise FeatureError("persistence must lie in (0, 1)")
        if not self.lacunarity > 1:
            raise FeatureError("lacunarity must exceed 1")


# ---------------------------------------------------------------------------
# Size-frequency sampling
# ---------------------------------------------------------------------------

def power_law_ppf(u, r_min: float, r_max: float, exponent: float):
    """Inverse CDF of p(r) ~ r**-exponent truncated to [r_min, r_max]."""
    u = np.asarray(u, dtype=float)
    if abs(exponent - 1.0) < 1e-12:
        return r_min * (r_max / r_min) ** u
    a = 1.0 - exponent
    lo, hi = r_min ** a, r_max ** a
    return (lo + u * (hi - lo)) ** (1.0 / a)


def power_law_cdf(r, r_min: float, r_max: float, exponent: float):
    r = np.clip(np.asarray(r, dtype=float), r_min, r_max)
    if abs(exponent - 1.0) < 1e-12:
        return np.log(r / r_min) / np.log(r_max / r_min)
    a = 1.0 - exponent
    return (r ** a - r_min ** a) / (r_max ** a - r_min ** a)


def _sample_features(region, density, r_min, r_max, exponent, seed):
    if not (0 < r_min < r_max):
        raise FeatureError("need 0 < r_min < r_max")
    if density < 0:
        raise FeatureError("density must be >= 0")
    xmin, xmax, ymin, ymax = region
    area_km2 = (xmax - xmin) * (ymax - ymin) / 1e6
    mean = density * area_km2
    if mean == 0:
        return np.zeros((0, 2)), np.zeros(0)
    n = int(np.random.default_rng(int(hash_u64(seed, _COUNT))).poisson(mean))
    idx = np.arange(n, dtype=np.uint64)
    cx = xmin + uniform(seed, _CENTER_X, idx) * (xmax - xmin)
    cy = ymin + uniform(seed, _CENTER_Y, idx) * (ymax - ymin)
    radii = power_law_ppf(uniform(seed, _RADIUS, idx), r_min, r_max, exponent)
    return np.column_stack([cx, cy]), radii


def generate_craters(region, density: float, r_min: float, r_max: float,
                     power_exponent: float = 3.0, seed: int = 0,
                     depth_ratio: float = DEPTH_RATIO, rim_ratio: float = RIM_RATIO) -> CraterField:
    """Poisson crater population over ``region = (xmin, xmax, ymin, ymax)``.

    ``density`` is in craters per km^2.
    """
    centers, radii = _sample_features(region, density, r_min, r_max, power_exponent, seed)
    return CraterField(centers, radii, depth_ratio * radii, rim_ratio * radii)


def generate_boulders(region, density: float, r_min: float, r_max: float,
                      power_exponent: float = 3.0, seed: int = 0) -> BoulderField:
    centers, radii = _sample_features(region, density, r_min, r_max, power_exponent, seed)
    return BoulderField(centers, radii)


# ---------------------------------------------------------------------------
# Craters
# ---------------------------------------------------------------------------

def crater_profile(rho, radius, depth, rim_height):
    """Height offset at radial distance ``rho`` from a crater centre."""
    rho = np.asarray(rho, dtype=float)
    s = rho / radius
    bowl = -depth + (depth + rim_height) * s * s
    with np.errstate(divide="ignore"):
        rim = rim_height / np.maximum(s, 1.0) ** 3
    return np.where(s <= 1.0, bowl, np.where(s <= RIM_CUTOFF, rim, 0.0))


def apply_craters(dem: DemGrid, field: CraterField) -> DemGrid:
    if len(field) == 0:
        return dem
    xmin, xmax, ymin, ymax = dem.extent
    cx, cy = field.centers[:, 0], field.centers[:, 1]
    if np.any((cx < xmin) | (cx > xmax) | (cy < ymin) | (cy > ymax)):
        raise FeatureError("crater centre outside the DEM extent")
    out = dem.heights.copy()
    xs, ys = dem.xs(), dem.ys()
    s = dem.cell_size
    for (x, y), r, d, h in zip(field.centers, field.radii, field.depths, field.rim_heights):
        reach = RIM_CUTOFF * r
        c0 = max(int(np.floor((x - reach - dem.origin[0]) / s)), 0)
        c1 = min(int(np.ceil((x + reach - dem.origin[0]) / s)) + 1, dem.ncols)
        r0 = max(int(np.floor((dem.origin[1] - y - reach) / s)), 0)
        r1 = min(int(np.ceil((dem.origin[1] - y + reach) / s)) + 1, dem.nrows)
        if c0 >= c1 or r0 >= r1:
            continue
        X, Y = np.meshgrid(xs[c0:c1], ys[r0:r1])
        out[r0:r1, c0:c1] += crater_profile(np.hypot(X - x, Y - y), r, d, h)
    return dem.with_heights(out)


# ---------------------------------------------------------------------------
# Perlin noise
# ---------------------------------------------------------------------------

def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin2(x, y, seed: int, octave: int = 0):
    """Classic 2-D gradient noise on the integer lattice.

    Lattice gradients are unit vectors at hashed angles, so the lattice is
    unbounded (no permutation-table period). Zero at every integer point.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xi, yi = np.floor(x), np.floor(y)
    fx, fy = x - xi, y - yi
    xi = xi.astype(np.int64)
    yi = yi.astype(np.int64)

    def corner(dx, dy):
        ang = 2 * np.pi * uniform(seed, octave, (xi + dx).astype(np.uint64), (yi + dy).astype(np.uint64))
        return np.cos(ang) * (fx - dx) + np.sin(ang) * (fy - dy)

    u, v = _fade(fx), _fade(fy)
    n00, n10, n01, n11 = corner(0, 0), corner(1, 0), corner(0, 1), corner(1, 1)
    a = n00 + u * (n10 - n00)
    b = n01 + u * (n11 - n01)
    return a + v * (b - a)


def fractal_noise(x, y, spec: NoiseSpec):
    total = np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
    weight = 0.0
    for k in range(spec.octaves):
        freq = spec.lacunarity ** k / spec.base_wavelength
        amp = spec.persistence ** k
        total += amp * perlin2(np.asarray(x) * freq, np.asarray(y) * freq, spec.seed, k)
        weight += amp
    return spec.amplitude * total / weight


def add_perlin(dem: DemGrid, spec: NoiseSpec) -> DemGrid:
    if spec.amplitude == 0:
        return dem
    X, Y = dem.cell_centers()
    return dem.with_heights(dem.heights + fractal_noise(X, Y, spec))
