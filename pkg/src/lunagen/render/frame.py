from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numba
import numpy as np
from PIL import Image

from ..checksum import file_checksum, fnv1a64
from ..dem import read_raster, sample_height, write_raster
from ..geom import CameraModel, Pose, Trajectory, interpolate_pose
from ..rng import uniform
from . import _kernels as K
from .scene import Scene

log = logging.getLogger(__name__)

_NOISE_STREAM = 0x6E6F697365  # "noise"


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    supersampling: int = 1  # n -> n*n jittered samples per pixel
    shadows: bool = True
    gain: float = 1.0  # DN per W m^-2 sr^-1
    bit_depth: int = 8
    seed: int = 0
    read_noise_dn: float = 0.0  # Gaussian sigma; 0 disables

    def __post_init__(self):
        if self.supersampling < 1:
            raise RenderError("supersampling must be >= 1")
        if not self.gain > 0:
            raise RenderError("gain must be positive")
        if self.bit_depth not in (8, 16):
            raise RenderError("bit_depth must be 8 or 16")
        if self.read_noise_dn < 0:
            raise RenderError("read_noise_dn must be >= 0")

    @property
    def full_scale(self) -> int:
        return (1 << self.bit_depth) - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "RenderConfig":
        return cls(**d)


@contextlib.contextmanager
def worker_threads(n: int | None):
    """Cap numba's worker pool for the duration of the block."""
    if n is None:
        yield
        return
    prev = numba.get_num_threads()
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    try:
        yield
    finally:
        numba.set_num_threads(prev)


def _check_pose(scene: Scene, pose: Pose):
    x, y, z = pose.position
    xmin, xmax, ymin, ymax = scene.dem.extent
    if xmin <= x <= xmax and ymin <= y <= ymax and z <= sample_height(scene.dem, x, y):
        raise RenderError("camera is below the terrain surface")


def render_radiance(scene: Scene, camera: CameraModel, pose: Pose, cfg: RenderConfig,
                    frame: int = 0, threads: int | None = None):
    """Linear radiance image and z-depth map (metres, +inf on miss)."""
    _check_pose(scene, pose)
    radiance = np.zeros((camera.height, camera.width))
    depth = np.zeros((camera.height, camera.width))
    intr = np.array([camera.fx, camera.fy, camera.cx, camera.cy])
    with worker_threads(threads):
        K.render_kernel(scene.arrays, intr, np.ascontiguousarray(pose.R_wc),
                        np.ascontiguousarray(pose.position), cfg.supersampling, cfg.shadows,
                        np.uint64(cfg.seed & (2**64 - 1)), frame, radiance, depth)
    return radiance, depth


def read_noise(cfg: RenderConfig, frame: int, shape) -> np.ndarray:
    """Counter-based Gaussian noise in DN (Box-Muller)."""
    rows, cols = np.meshgrid(np.arange(shape[0], dtype=np.uint64),
                             np.arange(shape[1], dtype=np.uint64), indexing="ij")
    u1 = uniform(cfg.seed, _NOISE_STREAM, frame, rows, cols, 0)
    u2 = uniform(cfg.seed, _NOISE_STREAM, frame, rows, cols, 1)
    return cfg.read_noise_dn * np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2 * np.pi * u2)


def to_digital(radiance: np.ndarray, cfg: RenderConfig, frame: int = 0) -> np.ndarray:
    dn = cfg.gain * radiance
    if cfg.read_noise_dn > 0:
        dn = dn + read_noise(cfg, frame, dn.shape)
    dn = np.clip(np.floor(dn + 0.5), 0, cfg.full_scale)
    return dn.astype(np.uint8 if cfg.bit_depth == 8 else np.uint16)


def render_frame(scene: Scene, camera: CameraModel, pose: Pose, cfg: RenderConfig,
                 frame: int = 0, threads: int | None = None):
    """Render one frame: (digital-number image, depth map)."""
    radiance, depth = render_radiance(scene, camera, pose, cfg, frame, threads)
    return to_digital(radiance, cfg, frame), depth


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(image).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def write_depth(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    write_raster(path, depth, {"ncols": w, "nrows": h, "cell_size_m": 1.0,
                               "origin_x_m": 0.0, "origin_y_m": 0.0, "nodata": None,
                               "units": "m", "kind": "depth"})


def read_depth(path) -> np.ndarray:
    data, _ = read_raster(path, allow_nonfinite=True)
    return data.astype(np.float64)


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------

STATE_FILE = "frames.json"


def render_fingerprint(scene: Scene, camera: CameraModel, cfg: RenderConfig) -> str:
    """Digest of everything that determines a frame's pixels besides its pose."""
    parts = [scene.dem.heights.tobytes(), repr(scene.dem.cell_size).encode(),
             repr(scene.dem.origin).encode(), scene.boulders.centers.tobytes(),
             scene.boulders.radii.tobytes(), json.dumps(scene.hapke.to_dict()).encode(),
             scene.sun_direction.tobytes(), repr(scene.sun_irradiance).encode(),
             b"" if scene.albedo_texture is None else scene.albedo_texture.tobytes(),
             json.dumps(camera.to_dict(), sort_keys=True).encode(),
             json.dumps(cfg.to_dict(), sort_keys=True).encode()]
    return f"{fnv1a64(b'|'.join(parts)):016x}"


def _record_matches(rec: dict, out: Path, t: float, pose: Pose) -> bool:
    if rec.get("t") != t or rec.get("pose") != pose.to_dict():
        return False
    for key in ("image", "depth"):
        p = out / rec[key]
        if not p.exists() or file_checksum(p) != rec["checksums"].get(rec[key]):
            return False
    return True


def render_trajectory(scene: Scene, camera: CameraModel, traj: Trajectory, frame_times,
                      cfg: RenderConfig, out_dir, threads: int | None = None) -> list[dict]:
    """Render every frame time to ``out_dir``; returns per-frame records.

    Frames whose outputs already exist with matching checksums are skipped.
    Progress is kept in ``frames.json`` with a ``complete`` flag that stays
    false until every frame has been written.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    times = [float(t) for t in frame_times]
    poses = [interpolate_pose(traj, t) for t in times]  # range errors before any work

    fingerprint = render_fingerprint(scene, camera, cfg)
    state_path = out / STATE_FILE
    previous = {}
    if state_path.exists():
        state = json.loads(state_path.read_text())
        if state.get("fingerprint") == fingerprint:
            previous = {r["frame_id"]: r for r in state["frames"]}

    records: list[dict] = []

    def save(complete: bool):
        state = {"complete": complete, "fingerprint": fingerprint, "frames": records}
        state_path.write_text(json.dumps(state, sort_keys=True, indent=1) + "\n")

    for i, (t, pose) in enumerate(zip(times, poses)):
        rec = previous.get(i)
        if rec is not None and _record_matches(rec, out, t, pose):
            log.debug("frame %d up to date, skipping", i)
            records.append(rec)
            continue
        try:
            image, depth = render_frame(scene, camera, pose, cfg, frame=i, threads=threads)
        except Exception:
            save(False)
            raise
        img_rel = f"images/{i:06d}.png"
        dep_rel = f"depth/{i:06d}.f32"
        write_image(out / img_rel, image)
        write_depth(out / dep_rel, depth.astype(np.float32))
        records.append({
            "frame_id": i, "t": t, "image": img_rel, "depth": dep_rel,
            "pose": pose.to_dict(),
            "checksums": {img_rel: file_checksum(out / img_rel),
                          dep_rel: file_checksum(out / dep_rel)},
        })
        save(False)
    save(True)
    return records


def parse_frame_times(spec: str) -> list[float]:
    """``"t0:t1:dt"`` -> [t0, t0+dt, ...] up to t1 inclusive."""
    t0, t1, dt = (float(v) for v in spec.split(":"))
    if dt <= 0:
        raise ValueError("frame step must be positive")
    n = int(math.floor((t1 - t0) / dt + 1e-9)) + 1
    return [t0 + k * dt for k in range(max(n, 0))]


@dataclass(frozen=True)
class GBuffer:
    """Per-sample shading geometry of a frame, shape (H, W, n*n)."""

    mu0: np.ndarray
    mu: np.ndarray
    phase: np.ndarray
    lit: np.ndarray
    albedo: np.ndarray
    obj: np.ndarray
    texel: np.ndarray  # flat DEM cell index under the hit, -1 on miss


def render_gbuffer(scene: Scene, camera: CameraModel, pose: Pose, supersampling: int = 1,
                   shadows: bool = True, seed: int = 0, frame: int = 0,
                   threads: int | None = None) -> GBuffer:
    """Trace a frame's samples exactly as :func:`render_frame` would, keeping
    the geometry instead of the radiance."""
    _check_pose(scene, pose)
    shape = (camera.height, camera.width, supersampling * supersampling)
    mu0, mu, g, alb = (np.zeros(shape) for _ in range(4))
    lit = np.zeros(shape, dtype=np.bool_)
    obj = np.zeros(shape, dtype=np.int64)
    texel = np.zeros(shape, dtype=np.int64)
    intr = np.array([camera.fx, camera.fy, camera.cx, camera.cy])
    with worker_threads(threads):
        K.gbuffer_kernel(scene.arrays, intr, np.ascontiguousarray(pose.R_wc),
                         np.ascontiguousarray(pose.position), supersampling, shadows,
                         np.uint64(seed & (2**64 - 1)), frame, mu0, mu, g, lit, alb, obj, texel)
    return GBuffer(mu0, mu, g, lit, alb, obj, texel)
