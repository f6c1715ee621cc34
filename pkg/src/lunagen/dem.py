"""Heightfield rasters: I/O, bilinear sampling, resampling and fusion.

Rasters are north-up: row 0 is the northern edge. Cell ``(r, c)`` has its
centre at ``x = x0 + c * cell_size``, ``y = y0 - r * cell_size`` where
``(x0, y0)`` is the centre of cell ``(0, 0)``.

On disk a raster is raw little-endian float32, row-major, with a JSON sidecar::

    {"ncols": 64, "nrows": 64, "cell_size_m": 5.0,
     "origin_x_m": 0.0, "origin_y_m": 315.0, "nodata": null}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_EDGE_TOL = 1e-9


class DemError(ValueError):
    pass


class OutOfBoundsError(DemError):
    pass


@dataclass(frozen=True)
class DemGrid:
    heights: np.ndarray  # (nrows, ncols)
    cell_size: float
    origin: tuple[float, float]

    def __post_init__(self):
        h = np.array(self.heights, dtype=np.float64)
        if h.ndim != 2 or h.size == 0:
            raise DemError("heights must be a non-empty 2-D array")
        if not self.cell_size > 0:
            raise DemError("cell_size must be positive")
        if not np.all(np.isfinite(h)):
            raise DemError("heights must be finite")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "cell_size", float(self.cell_size))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def nrows(self) -> int:
        return self.heights.shape[0]

    @property
    def ncols(self) -> int:
        return self.heights.shape[1]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) spanned by cell centres."""
        x0, y0 = self.origin
        return (x0, x0 + (self.ncols - 1) * self.cell_size,
                y0 - (self.nrows - 1) * self.cell_size, y0)

    def xs(self) -> np.ndarray:
        return self.origin[0] + np.arange(self.ncols) * self.cell_size

    def ys(self) -> np.ndarray:
        return self.origin[1] - np.arange(self.nrows) * self.cell_size

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xs(), self.ys())

    def with_heights(self, heights) -> "DemGrid":
        return DemGrid(heights, self.cell_size, self.origin)

    def header(self) -> dict:
        return {"ncols": self.ncols, "nrows": self.nrows, "cell_size_m": self.cell_size,
                "origin_x_m": self.origin[0], "origin_y_m": self.origin[1], "nodata": None}

    @classmethod
    def from_function(cls, ncols, nrows, cell_size, origin, fn) -> "DemGrid":
        xs = origin[0] + np.arange(ncols) * cell_size
        ys = origin[1] - np.arange(nrows) * cell_size
        X, Y = np.meshgrid(xs, ys)
        return cls(np.broadcast_to(fn(X, Y), X.shape), cell_size, origin)

    def crop(self, r0: int, r1: int, c0: int, c1: int) -> "DemGrid":
        x0, y0 = self.origin
        return DemGrid(self.heights[r0:r1, c0:c1], self.cell_size,
                       (x0 + c0 * self.cell_size, y0 - r0 * self.cell_size))


# ---------------------------------------------------------------------------
# Raster I/O
# ---------------------------------------------------------------------------

def _header_path(raster_path, header_path=None) -> Path:
    return Path(header_path) if header_path else Path(raster_path).with_suffix(".json")


def write_raster(path, array: np.ndarray, header: dict, header_path=None) -> None:
    path = Path(path)
    np.ascontiguousarray(array, dtype="<f4").tofile(path)
    _header_path(path, header_path).write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")


def read_raster(path, header_path=None, allow_nonfinite=False) -> tuple[np.ndarray, dict]:
    path = Path(path)
    hpath = _header_path(path, header_path)
    for p in (path, hpath):
        if not p.exists():
            raise FileNotFoundError(p)
    try:
        header = json.loads(hpath.read_text())
        ncols, nrows = int(header["ncols"]), int(header["nrows"])
        float(header["cell_size_m"]), float(header["origin_x_m"]), float(header["origin_y_m"])
    except (ValueError, KeyError, TypeError) as e:
        raise DemError(f"malformed raster header {hpath}: {e}") from e
    if ncols < 1 or nrows < 1:
        raise DemError(f"malformed raster header {hpath}: non-positive dimensions")
    data = np.fromfile(path, dtype="<f4")
    if data.size != ncols * nrows:
        raise DemError(f"dimension mismatch: header declares {ncols * nrows} cells, "
                       f"raster holds {data.size}")
    data = data.reshape(nrows, ncols)
    nodata = header.get("nodata")
    if nodata is not None:
        raise DemError("nodata values are not supported")
    if not allow_nonfinite and not np.all(np.isfinite(data)):
        raise DemError(f"non-finite values in {path}")
    return data, header


def write_dem(dem: DemGrid, raster_path, header_path=None) -> None:
    write_raster(raster_path, dem.heights, dem.header(), header_path)


def load_dem(raster_path, header_path=None) -> DemGrid:
    data, h = read_raster(raster_path, header_path)
    return DemGrid(data.astype(np.float64), float(h["cell_size_m"]),
                   (float(h["origin_x_m"]), float(h["origin_y_m"])))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _grid_coords(dem: DemGrid, x, y):
    gx = (np.asarray(x, dtype=float) - dem.origin[0]) / dem.cell_size
    gy = (dem.origin[1] - np.asarray(y, dtype=float)) / dem.cell_size
    return gx, gy


def _bilinear(h: np.ndarray, gx, gy):
    nrows, ncols = h.shape
    c0 = np.clip(np.floor(gx).astype(np.int64), 0, max(ncols - 2, 0))
    r0 = np.clip(np.floor(gy).astype(np.int64), 0, max(nrows - 2, 0))
    c1 = np.minimum(c0 + 1, ncols - 1)
    r1 = np.minimum(r0 + 1, nrows - 1)
    fx = gx - c0 if ncols > 1 else np.zeros_like(gx)
    fy = gy - r0 if nrows > 1 else np.zeros_like(gy)
    top = h[r0, c0] * (1 - fx) + h[r0, c1] * fx
    bot = h[r1, c0] * (1 - fx) + h[r1, c1] * fx
    return top * (1 - fy) + bot * fy


def _check_inside(dem: DemGrid, gx, gy, margin=0.0):
    tol = _EDGE_TOL
    bad = ((gx < margin - tol) | (gx > dem.ncols - 1 - margin + tol)
           | (gy < margin - tol) | (gy > dem.nrows - 1 - margin + tol))
    if np.any(bad):
        raise OutOfBoundsError("query outside the DEM coverage")


def sample_height(dem: DemGrid, x, y):
    """Bilinear height at world (x, y); scalars or arrays."""
    gx, gy = _grid_coords(dem, x, y)
    _check_inside(dem, gx, gy)
    gx = np.clip(gx, 0, dem.ncols - 1)
    gy = np.clip(gy, 0, dem.nrows - 1)
    out = _bilinear(dem.heights, gx, gy)
    return float(out) if np.ndim(out) == 0 else out


def normal_at(dem: DemGrid, x, y):
    """Unit surface normal from central differences with a one-cell step."""
    gx, gy = _grid_coords(dem, x, y)
    _check_inside(dem, gx, gy, margin=1.0)
    s = dem.cell_size
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dhdx = (sample_height(dem, x + s, y) - sample_height(dem, x - s, y)) / (2 * s)
    dhdy = (sample_height(dem, x, y + s) - sample_height(dem, x, y - s)) / (2 * s)
    n = np.stack(np.broadcast_arrays(-dhdx, -dhdy, np.ones_like(dhdx)), axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def resample(dem: DemGrid, new_cell_size: float) -> DemGrid:
    if not new_cell_size > 0:
        raise DemError("new_cell_size must be positive")
    xmin, xmax, ymin, ymax = dem.extent
    ncols = int(np.floor((xmax - xmin) / new_cell_size + 1e-9)) + 1
    nrows = int(np.floor((ymax - ymin) / new_cell_size + 1e-9)) + 1
    xs = dem.origin[0] + np.arange(ncols) * new_cell_size
    ys = dem.origin[1] - np.arange(nrows) * new_cell_size
    X, Y = np.meshgrid(xs, ys)
    gx, gy = _grid_coords(dem, X, Y)
    out = _bilinear(dem.heights, np.clip(gx, 0, dem.ncols - 1), np.clip(gy, 0, dem.nrows - 1))
    return DemGrid(out, new_cell_size, dem.origin)


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FusionConfig:
    feather_width: float | None = None  # metres; None -> 20 output cells
    offset_correction: bool = True

    def __post_init__(self):
        if self.feather_width is not None and self.feather_width < 0:
            raise DemError("feather_width must be >= 0")


DEFAULT_FEATHER_CELLS = 20


def footprint_offset(low: DemGrid, high: DemGrid) -> float:
    """mean(low - high) over the high-resolution cells."""
    X, Y = high.cell_centers()
    return float(np.mean(sample_height(low, X, Y) - high.heights))


def fuse(low: DemGrid, high: DemGrid, cfg: FusionConfig = FusionConfig()) -> DemGrid:
    """Merge a high-resolution patch into a low-resolution base DEM.

    The output has ``high``'s cell size over ``low``'s extent. Inside the
    high-resolution footprint shrunk by the feather width the output is the
    (offset-corrected) high DEM; outside the footprint it is the resampled low
    DEM; in between it blends linearly with distance to the footprint edge.
    """
    if high.nrows < 2 or high.ncols < 2:
        raise DemError("empty overlap: high-resolution DEM has no area")
    lx0, lx1, ly0, ly1 = low.extent
    hx0, hx1, hy0, hy1 = high.extent
    tol = _EDGE_TOL * max(low.cell_size, high.cell_size)
    if hx0 < lx0 - tol or hx1 > lx1 + tol or hy0 < ly0 - tol or hy1 > ly1 + tol:
        raise DemError("high-resolution DEM is not contained in the low-resolution extent")

    feather = cfg.feather_width
    if feather is None:
        feather = DEFAULT_FEATHER_CELLS * high.cell_size
    offset = footprint_offset(low, high) if cfg.offset_correction else 0.0

    base = resample(low, high.cell_size)
    X, Y = base.cell_centers()
    out = base.heights.copy()

    inside = (X >= hx0 - tol) & (X <= hx1 + tol) & (Y >= hy0 - tol) & (Y <= hy1 + tol)
    if not inside.any():
        raise DemError("empty overlap between the output grid and the high-resolution DEM")
    xi, yi = X[inside], Y[inside]
    gx, gy = _grid_coords(high, xi, yi)
    hi = _bilinear(high.heights, np.clip(gx, 0, high.ncols - 1),
                   np.clip(gy, 0, high.nrows - 1)) + offset
    lo = out[inside]
    if feather == 0:
        w = np.ones_like(hi)
    else:
        d = np.minimum.reduce([xi - hx0, hx1 - xi, yi - hy0, hy1 - yi])
        w = np.clip(d / feather, 0.0, 1.0)
    out[inside] = np.where(w >= 1.0, hi, lo + w * (hi - lo))
    return base.with_heights(out)
