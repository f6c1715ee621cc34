"""End-to-end dataset generation: dem -> augment -> render -> flow -> manifest -> validate.

A run is described by one JSON document (see :func:`demo_config` for a
complete example). Relative paths in it resolve against the config file's
directory. All randomness comes from the top-level ``seed`` through named
sub-seeds, so rerunning a config reproduces every output byte; wall-clock
timings live only in ``run_log.json``.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
import time
from pathlib import Path

import numpy as np

from .bench import DatasetManifest, build_manifest, canonical_json, validate_dataset
from .dem import DemGrid, FusionConfig, fuse, load_dem, write_dem
from .geom import CameraModel, Pose, Trajectory, look_at, read_trajectory, write_trajectory
from .procedural import (BoulderField, CraterField, NoiseSpec, add_perlin, apply_craters,
                         generate_boulders, generate_craters)
from .rng import sub_seed

log = logging.getLogger(__name__)

STAGES = ("dem", "augment", "render", "groundtruth", "manifest", "validate")
INCOMPLETE_MARKER = "INCOMPLETE"
RUN_LOG = "run_log.json"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class ValidationFailure(RuntimeError):
    def __init__(self, report):
        super().__init__("dataset validation failed: " +
                         "; ".join(f"{c.name}: {c.detail}" for c in report.failures()))
        self.report = report


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------

def save_scene(path, scene, dem_file: str = "terrain.f32") -> None:
    """Write ``scene`` as JSON plus its DEM (and albedo texture) rasters alongside."""
    from .dem import write_raster

    path = Path(path)
    write_dem(scene.dem, path.parent / dem_file)
    doc = {"dem": dem_file, "boulders": scene.boulders.to_dict(), "hapke": scene.hapke.to_dict(),
           "sun_direction": [float(v) for v in scene.sun_direction],
           "sun_irradiance": float(scene.sun_irradiance), "albedo_texture": None}
    if scene.albedo_texture is not None:
        tex = Path(dem_file).stem + "_albedo.f32"
        write_raster(path.parent / tex, scene.albedo_texture.astype(np.float32),
                     {**scene.dem.header(), "kind": "albedo"})
        doc["albedo_texture"] = tex
    path.write_text(canonical_json(doc))


def load_scene(path):
    from .dem import read_raster
    from .render import HapkeParams, Scene

    path = Path(path)
    doc = json.loads(path.read_text())
    dem = load_dem(path.parent / doc["dem"])
    tex = None
    if doc.get("albedo_texture"):
        tex, _ = read_raster(path.parent / doc["albedo_texture"])
    boulders = BoulderField.from_dict(doc["boulders"]) if doc.get("boulders") else BoulderField.empty()
    return Scene(dem, boulders, HapkeParams.from_dict(doc.get("hapke", {})),
                 tuple(doc.get("sun_direction", (0.0, 0.0, 1.0))),
                 float(doc.get("sun_irradiance", 1361.0)), tex)


def sun_vector(azimuth_deg: float, elevation_deg: float) -> tuple[float, float, float]:
    """Unit vector towards the sun; azimuth clockwise from north (+y)."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return (math.cos(el) * math.sin(az), math.cos(el) * math.cos(az), math.sin(el))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def augment_dem(dem: DemGrid, aug: dict, seed: int):
    """Apply the configured craters and noise and draw boulders; returns
    (dem, craters, boulders, resolved augmentation record)."""
    craters, boulders = CraterField.empty(), BoulderField.empty()
    record = {}
    if aug.get("craters"):
        c = aug["craters"]
        s = sub_seed(seed, "craters")
        craters = generate_craters(dem.extent, c["density"], c["r_min"], c["r_max"],
                                   c.get("exponent", 3.0), s)
        dem = apply_craters(dem, craters)
        record["craters"] = {**c, "seed": s, "count": len(craters)}
    if aug.get("perlin"):
        p = dict(aug["perlin"])
        s = sub_seed(seed, "perlin")
        p.pop("seed", None)
        dem = add_perlin(dem, NoiseSpec(seed=s, **p))
        record["perlin"] = {**p, "seed": s}
    if aug.get("boulders"):
        b = aug["boulders"]
        s = sub_seed(seed, "boulders")
        boulders = generate_boulders(dem.extent, b["density"], b["r_min"], b["r_max"],
                                     b.get("exponent", 3.0), s)
        record["boulders"] = {**b, "seed": s, "count": len(boulders)}
    return dem, craters, boulders, record


def write_flows(out: Path, records: list[dict], camera: CameraModel) -> list[str]:
    """Forward flow between consecutive frames, from the stored float32 depth maps."""
    from .groundtruth import compute_flow, write_flo
    from .render import read_depth

    (out / "flow").mkdir(exist_ok=True)
    paths = []
    for a, b in zip(records, records[1:]):
        flow = compute_flow(read_depth(out / a["depth"]), Pose.from_dict(a["pose"]),
                            Pose.from_dict(b["pose"]), camera, read_depth(out / b["depth"]))
        rel = f"flow/{a['frame_id']:06d}.flo"
        write_flo(out / rel, flow)
        paths.append(rel)
    return paths


def run_pipeline(config: dict, base_dir=".", out_dir=None, threads: int | None = None,
                 seed: int | None = None) -> tuple[DatasetManifest, dict]:
    """Execute every stage; returns the validated manifest and the run log.

    Raises :class:`PipelineError` naming the failing stage (an ``INCOMPLETE``
    marker is left in the output directory) or :class:`ValidationFailure`
    when the finished dataset does not validate.
    """
    from .render import HapkeParams, RenderConfig, Scene, render_trajectory
    from .render.frame import parse_frame_times

    base = Path(base_dir)
    out = Path(out_dir) if out_dir is not None else _resolve(base, config.get("output", "out"))
    top_seed = int(config.get("seed", 0) if seed is None else seed)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE_MARKER
    stage_log: list[dict] = []
    run_log = {"seed": top_seed, "threads": threads, "stages": stage_log}
    state: dict = {}

    def stage(name, fn):
        marker.write_text(name + "\n")
        t0 = time.perf_counter()
        try:
            extra = fn() or {}
        except (ValidationFailure, PipelineError):
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc
        stage_log.append({"stage": name, "seconds": time.perf_counter() - t0,
                          "seed": sub_seed(top_seed, name), **extra})

    def dem_stage():
        d = config["dem"]
        low = load_dem(_resolve(base, d["low"]))
        if d.get("high"):
            high = load_dem(_resolve(base, d["high"]))
            fcfg = FusionConfig(**d.get("fusion", {}))
            state["dem"] = fuse(low, high, fcfg)
        else:
            state["dem"] = low
        (out / "terrain").mkdir(exist_ok=True)
        write_dem(state["dem"], out / "terrain" / "fused.f32")
        return {"shape": list(state["dem"].heights.shape)}

    def augment_stage():
        dem, craters, boulders, record = augment_dem(
            state["dem"], config.get("augment", {}), sub_seed(top_seed, "augment"))
        sc = config.get("scene", {})
        sun = sc.get("sun_direction")
        if sun is None and "sun_azimuth_deg" in sc:
            sun = sun_vector(sc["sun_azimuth_deg"], sc["sun_elevation_deg"])
        sun = np.asarray(sun if sun is not None else (0.0, 0.0, 1.0), dtype=float)
        scene = Scene(dem, boulders, HapkeParams.from_dict(sc.get("hapke", {})),
                      sun / np.linalg.norm(sun), float(sc.get("sun_irradiance", 1361.0)))
        save_scene(out / "terrain" / "scene.json", scene, "augmented.f32")
        (out / "terrain" / "craters.json").write_text(canonical_json(craters.to_dict()))
        state["scene"] = scene
        state["augmentation"] = record
        return {"features": {k: v.get("count") for k, v in record.items()}}

    def render_stage():
        camera = CameraModel.from_dict(config["camera"])
        traj = read_trajectory(_resolve(base, config["trajectory"]))
        frames = config["frames"]
        times = parse_frame_times(frames) if isinstance(frames, str) else [float(t) for t in frames]
        rc = dict(config.get("render", {}))
        rc["seed"] = sub_seed(top_seed, "render")
        cfg = RenderConfig.from_dict(rc)
        state.update(camera=camera, render_cfg=cfg)
        state["records"] = render_trajectory(state["scene"], camera, traj, times, cfg, out,
                                             threads=threads)
        return {"frames": len(state["records"])}

    def groundtruth_stage():
        flows = write_flows(out, state["records"], state["camera"])
        for rec, rel in zip(state["records"], flows):
            rec["flow"] = rel
        return {"flow_pairs": len(flows)}

    def manifest_stage():
        frames = [{k: r[k] for k in ("frame_id", "t", "image", "depth", "pose", "flow") if k in r}
                  for r in state["records"]]
        for f in frames:
            f["sequence"] = "0"
        snapshot = {"camera": state["camera"].to_dict(), "render": state["render_cfg"].to_dict(),
                    "scene": {"hapke": state["scene"].hapke.to_dict(),
                              "sun_direction": [float(v) for v in state["scene"].sun_direction],
                              "sun_irradiance": state["scene"].sun_irradiance},
                    "dem": config["dem"], "augmentation": state["augmentation"],
                    "trajectory": str(config["trajectory"]), "frames": config["frames"],
                    "seed": top_seed}
        m = build_manifest(config.get("dataset_id", "DATASET"), config.get("scenario", "Natural"),
                           config.get("kind", "Synthetic"), frames, snapshot, root=out,
                           description=config.get("description", ""))
        m.save(out / "manifest.json")
        state["manifest"] = m
        return {"manifest": "manifest.json"}

    def validate_stage():
        report = validate_dataset(state["manifest"], out, flow_sample=None)
        (out / "validation.json").write_text(canonical_json(report.to_dict()))
        if not report.passed:
            raise ValidationFailure(report)
        return {"checks": len(report.checks)}

    try:
        for name, fn in zip(STAGES, (dem_stage, augment_stage, render_stage, groundtruth_stage,
                                     manifest_stage, validate_stage)):
            stage(name, fn)
    finally:
        (out / RUN_LOG).write_text(json.dumps(run_log, indent=1, sort_keys=True) + "\n")
    marker.unlink()
    return state["manifest"], run_log


# ---------------------------------------------------------------------------
# Bundled miniature scene
# ---------------------------------------------------------------------------

def _demo_low() -> DemGrid:
    # 22x22 cells at 15 m: gentle rolling terrain, 315 m square
    def h(x, y):
        return 6.0 * np.sin(x / 70.0) * np.cos(y / 55.0) + 0.02 * x
    return DemGrid.from_function(22, 22, 15.0, (0.0, 315.0), h)


def _demo_high() -> DemGrid:
    # 24x24 cells at 5 m, centred in the low-resolution extent, with extra detail
    def h(x, y):
        return (6.0 * np.sin(x / 70.0) * np.cos(y / 55.0) + 0.02 * x + 1.5
                + 0.8 * np.sin(x / 9.0) * np.sin(y / 11.0))
    return DemGrid.from_function(24, 24, 5.0, (100.0, 215.0), h)


def demo_trajectory(n_samples: int = 11, t1: float = 10.0) -> Trajectory:
    """Oblique descent over the demo terrain, looking ahead and down."""
    samples = []
    for k in range(n_samples):
        t = t1 * k / (n_samples - 1)
        pos = np.array([120.0 + 3.0 * t, 90.0 + 4.0 * t, 140.0 - 4.0 * t])
        samples.append((t, look_at(pos, (160.0 + 1.0 * t, 190.0, 0.0))))
    return Trajectory.from_samples(samples)


def demo_config() -> dict:
    return {
        "dataset_id": "DEMO-SYNTH-1", "scenario": "Natural", "kind": "Synthetic",
        "description": "Miniature fused and augmented terrain, 10-frame oblique descent",
        "seed": 2024,
        "dem": {"low": "low.f32", "high": "high.f32",
                "fusion": {"feather_width": 25.0, "offset_correction": True}},
        "augment": {"craters": {"density": 400.0, "r_min": 4.0, "r_max": 30.0, "exponent": 3.0},
                    "perlin": {"amplitude": 0.5, "base_wavelength": 40.0, "octaves": 3},
                    "boulders": {"density": 3000.0, "r_min": 0.5, "r_max": 2.5, "exponent": 3.0}},
        "scene": {"hapke": {"w": 0.11, "b": -0.4, "B0": 1.0, "h": 0.06},
                  "sun_azimuth_deg": 120.0, "sun_elevation_deg": 35.0, "sun_irradiance": 1361.0},
        "camera": CameraModel.from_fov(128, 128, 50.0).to_dict(),
        "trajectory": "trajectory.csv",
        "frames": "0:9:1",
        "render": {"supersampling": 2, "shadows": True, "gain": 12.0, "bit_depth": 8},
        "output": "out",
    }


def write_demo(directory) -> Path:
    """Materialise the demo inputs; returns the path of its config.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_dem(_demo_low(), d / "low.f32")
    write_dem(_demo_high(), d / "high.f32")
    write_trajectory(d / "trajectory.csv", demo_trajectory())
    cfg = d / "config.json"
    cfg.write_text(canonical_json(demo_config()))
    return cfg


def load_config(path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        return json.loads(path.read_text()), path.parent
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError("config", str(exc)) from exc


def clean_output(out) -> None:
    out = Path(out)
    if out.exists():
        shutil.rmtree(out)
