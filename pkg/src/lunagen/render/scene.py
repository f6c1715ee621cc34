from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..dem import DemGrid, sample_height
from ..geom import Ray
from ..procedural import BoulderField
from . import _kernels as K
from .hapke import HapkeParams


@dataclass(frozen=True)
class Scene:
    """Immutable renderable scene: terrain, boulders, photometry, sun."""

    dem: DemGrid
    boulders: BoulderField = field(default_factory=BoulderField.empty)
    hapke: HapkeParams = field(default_factory=HapkeParams)
    sun_direction: np.ndarray = (0.0, 0.0, 1.0)  # unit vector towards the sun
    sun_irradiance: float = 1361.0
    albedo_texture: np.ndarray | None = None  # per-DEM-cell radiance multiplier

    def __post_init__(self):
        s = np.array(self.sun_direction, dtype=float).reshape(3)
        if abs(np.linalg.norm(s) - 1.0) > 1e-9:
            raise ValueError("sun_direction must be a unit vector")
        s.setflags(write=False)
        object.__setattr__(self, "sun_direction", s)
        if self.dem.nrows < 2 or self.dem.ncols < 2:
            raise ValueError("renderable DEMs need at least 2x2 cells")
        if not self.sun_irradiance >= 0:
            raise ValueError("sun_irradiance must be >= 0")
        if self.albedo_texture is not None:
            tex = np.array(self.albedo_texture, dtype=float)
            if tex.shape != self.dem.heights.shape:
                raise ValueError("albedo texture must match the DEM shape")
            if np.any(tex < 0) or not np.all(np.isfinite(tex)):
                raise ValueError("albedo texture must be finite and >= 0")
            tex.setflags(write=False)
            object.__setattr__(self, "albedo_texture", tex)
        if len(self.boulders):
            xmin, xmax, ymin, ymax = self.dem.extent
            c = self.boulders.centers
            if np.any((c[:, 0] < xmin) | (c[:, 0] > xmax) | (c[:, 1] < ymin) | (c[:, 1] > ymax)):
                raise ValueError("boulder centre outside the DEM extent")

    def replace(self, **kw) -> "Scene":
        d = {f: getattr(self, f) for f in
             ("dem", "boulders", "hapke", "sun_direction", "sun_irradiance", "albedo_texture")}
        d.update(kw)
        return Scene(**d)

    @cached_property
    def boulder_base_heights(self) -> np.ndarray:
        if not len(self.boulders):
            return np.zeros(0)
        c = self.boulders.centers
        return np.asarray(sample_height(self.dem, c[:, 0], c[:, 1]), dtype=float).reshape(-1)

    @cached_property
    def arrays(self) -> K.SceneArrays:
        dem = self.dem
        H = np.ascontiguousarray(dem.heights, dtype=np.float64)
        cs = dem.cell_size
        x0, y0 = dem.origin
        npr, npc = dem.nrows - 1, dem.ncols - 1
        bc = self.boulders.centers
        br = self.boulders.radii
        bz = self.boulder_base_heights
        cells: list[list[int]] = [[] for _ in range(npr * npc)]
        tops = []
        for m in range(len(br)):
            c_lo = int(np.floor((bc[m, 0] - br[m] - x0) / cs))
            c_hi = int(np.floor((bc[m, 0] + br[m] - x0) / cs))
            r_lo = int(np.floor((y0 - bc[m, 1] - br[m]) / cs))
            r_hi = int(np.floor((y0 - bc[m, 1] + br[m]) / cs))
            for i in range(max(r_lo, 0), min(r_hi, npr - 1) + 1):
                for j in range(max(c_lo, 0), min(c_hi, npc - 1) + 1):
                    cells[i * npc + j].append(m)
                    tops.append((i, j, bz[m] + br[m]))
        pstart = np.zeros(npr * npc + 1, dtype=np.int64)
        pstart[1:] = np.cumsum([len(c) for c in cells])
        pitems = np.array([m for c in cells for m in c], dtype=np.int64)
        mip, lrows, lcols, loff = K.build_mipmap(H, tops)
        has_tex = self.albedo_texture is not None
        tex = self.albedo_texture if has_tex else np.ones((1, 1))
        hp = self.hapke
        return K.SceneArrays(
            H, float(x0), float(y0), float(cs), mip, lrows, lcols, loff,
            np.ascontiguousarray(bc[:, 0]), np.ascontiguousarray(bc[:, 1]), bz,
            np.ascontiguousarray(br, dtype=np.float64), pstart, pitems,
            np.ascontiguousarray(tex, dtype=np.float64), has_tex,
            np.array([hp.w, hp.b, hp.B0, hp.h]), bool(hp.black),
            np.ascontiguousarray(self.sun_direction), float(self.sun_irradiance),
            1e-3 * cs)


@dataclass(frozen=True)
class Hit:
    t: float
    point: np.ndarray
    normal: np.ndarray
    object: int  # -1 terrain, >= 0 boulder index

    @property
    def is_terrain(self) -> bool:
        return self.object == K.TERRAIN


def trace_ray(scene: Scene, ray: Ray) -> Hit | None:
    """Nearest intersection with the terrain or a boulder, or None."""
    S = scene.arrays
    o, d = ray.origin, ray.direction
    t, obj = K.trace(S, o[0], o[1], o[2], d[0], d[1], d[2], 0.0, math.inf)
    if obj == K.MISS:
        return None
    p = o + t * d
    n = np.array(K.hit_normals(S, p[0], p[1], p[2], obj)[:3])
    return Hit(float(t), p, n, int(obj))


def trace_rays(scene: Scene, origins, directions) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`trace_ray`: (t, object) arrays, t = inf on miss."""
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    t = np.empty(len(o))
    obj = np.empty(len(o), dtype=np.int64)
    K.trace_many(scene.arrays, o, d, t, obj)
    return t, obj


def shade(scene: Scene, hit: Hit, ray: Ray, shadows: bool = True) -> float:
    """Radiance (W m^-2 sr^-1) leaving ``hit`` back along ``ray``."""
    S = scene.arrays
    d = ray.direction
    x, y, z = hit.point
    mu0, mu, cosg, lit = K.shade_geometry(S, x, y, z, hit.object, d[0], d[1], d[2], shadows)
    if not lit or scene.hapke.black:
        return 0.0
    hp = scene.hapke
    r = K.hapke_jit_cos(hp.w, hp.b, hp.B0, hp.h, mu0, mu, cosg)
    return float(scene.sun_irradiance * r * K.albedo_at(S, x, y))
