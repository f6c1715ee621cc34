"""``lunagen`` command line: one subcommand per pipeline step, plus ``run`` and ``demo``.

Exit codes: 0 success, 2 validation failure, 1 any other error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("lunagen")

EXIT_OK, EXIT_ERROR, EXIT_INVALID = 0, 1, 2


def _floats(text: str, n: int, what: str) -> list[float]:
    parts = text.split(",")
    if len(parts) != n:
        raise argparse.ArgumentTypeError(f"{what} needs {n} comma-separated values")
    return [float(p) for p in parts]


def _write_json(path, obj) -> None:
    from .bench import canonical_json

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(canonical_json(obj))


def _load_camera(path):
    from .geom import CameraModel

    return CameraModel.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_dem_fuse(a) -> int:
    from .dem import FusionConfig, fuse, load_dem, write_dem

    out = fuse(load_dem(a.low), load_dem(a.high), FusionConfig(a.feather_m, a.offset_correct))
    write_dem(out, a.out)
    print(f"fused DEM {out.ncols}x{out.nrows} at {out.cell_size} m -> {a.out}")
    return EXIT_OK


def cmd_augment(a) -> int:
    from .dem import load_dem, write_dem
    from .pipeline import augment_dem

    aug = {}
    keys = ("density", "r_min", "r_max", "exponent")
    if a.craters:
        aug["craters"] = dict(zip(keys, _floats(a.craters, 4, "--craters")))
    if a.boulders:
        aug["boulders"] = dict(zip(keys, _floats(a.boulders, 4, "--boulders")))
    if a.perlin:
        amp, wl, octv = _floats(a.perlin, 3, "--perlin")
        aug["perlin"] = {"amplitude": amp, "base_wavelength": wl, "octaves": int(octv)}
    dem, craters, boulders, record = augment_dem(load_dem(a.dem), aug, a.seed)
    out = Path(a.out)
    write_dem(dem, out)
    _write_json(out.with_name(out.stem + "_features.json"),
                {"craters": craters.to_dict(), "boulders": boulders.to_dict(),
                 "augmentation": record, "seed": a.seed})
    print(f"{len(craters)} craters, {len(boulders)} boulders -> {out}")
    return EXIT_OK


def cmd_render(a) -> int:
    from .geom import read_trajectory
    from .pipeline import load_scene
    from .render import RenderConfig, render_trajectory
    from .render.frame import parse_frame_times

    cfg = RenderConfig(a.ss, a.shadows, a.gain, a.bit_depth, a.seed, a.read_noise)
    camera = _load_camera(a.camera)
    records = render_trajectory(load_scene(a.scene), camera, read_trajectory(a.traj),
                                parse_frame_times(a.frames), cfg, a.out, threads=a.threads)
    _write_json(Path(a.out) / "camera.json", camera.to_dict())
    _write_json(Path(a.out) / "render.json", cfg.to_dict())
    print(f"rendered {len(records)} frames -> {a.out}")
    return EXIT_OK


def _frame_records(directory: Path) -> list[dict]:
    from .render.frame import STATE_FILE

    state = json.loads((directory / STATE_FILE).read_text())
    if not state.get("complete"):
        raise RuntimeError(f"{directory} holds an incomplete render")
    return state["frames"]


def cmd_flow(a) -> int:
    from .pipeline import write_flows

    d = Path(a.frames)
    camera = _load_camera(a.camera or d / "camera.json")
    paths = write_flows(d, _frame_records(d), camera)
    print(f"wrote {len(paths)} flow fields -> {d / 'flow'}")
    return EXIT_OK


def cmd_invert_los(a) -> int:
    from .geom import read_trajectory, write_trajectory
    from .groundtruth import invert_los, read_landmarks_csv, read_los_csv

    init = read_trajectory(a.initial)
    initial = {k: p for k, p in enumerate(init.poses)}
    times = {k: float(t) for k, t in enumerate(init.times)}
    traj, report = invert_los(read_los_csv(a.los), read_landmarks_csv(a.landmarks), initial, times)
    write_trajectory(a.out, traj)
    out = Path(a.out)
    _write_json(out.with_name(out.stem + "_report.json"), report)
    bad = [r["frame_id"] for r in report if not r["converged"]]
    print(f"inverted {len(report)} frames -> {a.out}"
          + (f"; not converged: {bad}" if bad else ""))
    return EXIT_OK


def _references(directory: Path):
    from .geom import Pose
    from .render import read_image

    return [(read_image(directory / r["image"]), Pose.from_dict(r["pose"]), r["frame_id"])
            for r in _frame_records(directory)]


def cmd_capture_fit(a) -> int:
    from .capture import CaptureProblem, fit_brdf
    from .pipeline import load_scene
    from .render import RenderConfig

    refs = Path(a.refs)
    camera = _load_camera(a.camera or refs / "camera.json")
    cfg_path = refs / "render.json"
    cfg = RenderConfig.from_dict(json.loads(cfg_path.read_text())) if cfg_path.exists() \
        else RenderConfig()
    free = tuple(s.strip() for s in a.free.split(",") if s.strip())
    problem = CaptureProblem(_references(refs), camera, load_scene(a.scene), cfg, free)
    res = fit_brdf(problem, a.max_iters, a.step_tolerance)
    _write_json(a.out, {"hapke": res.hapke.to_dict(), "gain": res.gain, "free": list(free),
                        "loss_trace": res.loss_trace, "iterations": res.iterations,
                        "converged": res.converged, "warning": res.warning})
    print(f"fitted {', '.join(f'{n}={getattr(res.hapke, n, res.gain):.6g}' for n in free)} "
          f"after {res.iterations} iterations -> {a.out}")
    return EXIT_OK


def cmd_capture_texture(a) -> int:
    from .capture import backproject_textures
    from .pipeline import load_scene
    from .render import RenderConfig

    refs = Path(a.refs)
    camera = _load_camera(a.camera or refs / "camera.json")
    cfg = RenderConfig.from_dict(json.loads((refs / "render.json").read_text()))
    views = [(im, pose) for im, pose, _ in _references(refs)]
    grid = backproject_textures(views, camera, load_scene(a.scene), cfg.gain,
                                shadows=cfg.shadows, full_scale=cfg.full_scale)
    grid.save(a.out)
    print(f"{int(grid.valid.sum())} of {grid.valid.size} texels recovered -> {a.out}")
    return EXIT_OK


def cmd_bench_epe(a) -> int:
    from .bench import DatasetManifest, evaluate_predictions

    report = evaluate_predictions(DatasetManifest.load(a.manifest), a.pred)
    _write_json(a.out, report)
    print(f"mean EPE {report['mean_epe']:.4f} px over {report['valid_count']} pixels")
    return EXIT_OK


def cmd_dataset_validate(a) -> int:
    from .bench import DatasetManifest, validate_dataset

    m = DatasetManifest.load(a.manifest)
    report = validate_dataset(m, metadata_only=a.metadata_only,
                              flow_sample=None if a.all_flows else 8)
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}" + (f": {c.detail}" if c.detail else ""))
    if a.out:
        _write_json(a.out, report.to_dict())
    return EXIT_OK if report.passed else EXIT_INVALID


def cmd_dataset_catalogue(a) -> int:
    from .bench import CATALOGUE, catalogue_manifest

    if a.dataset_id is None:
        for e in CATALOGUE:
            counts = "+".join(str(n) for n in e.sequence_lengths)
            print(f"{e.dataset_id:12s} {e.scenario:8s} {e.kind:12s} {counts:>16s}  {e.description}")
        return EXIT_OK
    m = catalogue_manifest(a.dataset_id)
    if a.out:
        m.save(a.out)
    print(f"{m.dataset_id}: {m.frame_count} frames, sequences {m.sequences}")
    return EXIT_OK


def _run(config, base, a) -> int:
    from .pipeline import run_pipeline

    manifest, run_log = run_pipeline(config, base, a.out, threads=a.threads, seed=a.seed)
    total = sum(s["seconds"] for s in run_log["stages"])
    print(f"{manifest.dataset_id}: {manifest.frame_count} frames validated in {total:.1f} s")
    return EXIT_OK


def cmd_run(a) -> int:
    from .pipeline import load_config

    config, base = load_config(a.config)
    return _run(config, base, a)


def cmd_demo(a) -> int:
    from .pipeline import load_config, write_demo

    root = Path(a.dir)
    config, base = load_config(write_demo(root))
    if a.out is None:
        a.out = str(root / "out")
    return _run(config, base, a)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="top-level random seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="lunagen", parents=[common],
                                description="Synthetic lunar-landing datasets with exact ground truth.")
    p.set_defaults(seed=None, threads=None, verbose=False)
    sub = p.add_subparsers(dest="command", required=True)

    dem = sub.add_parser("dem", help="DEM tools").add_subparsers(dest="action", required=True)
    f = dem.add_parser("fuse", parents=[common], help="merge a high-resolution patch into a base DEM")
    f.add_argument("--low", required=True)
    f.add_argument("--high", required=True)
    f.add_argument("--feather-m", type=float, default=None)
    f.add_argument("--offset-correct", action=argparse.BooleanOptionalAction, default=True)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_dem_fuse)

    g = sub.add_parser("augment", parents=[common], help="add craters, boulders and noise")
    g.add_argument("--dem", required=True)
    g.add_argument("--craters", metavar="DENSITY,RMIN,RMAX,EXP")
    g.add_argument("--boulders", metavar="DENSITY,RMIN,RMAX,EXP")
    g.add_argument("--perlin", metavar="AMP,WAVELENGTH,OCTAVES")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_augment)

    r = sub.add_parser("render", parents=[common], help="render images and depth along a trajectory")
    r.add_argument("--scene", required=True)
    r.add_argument("--traj", required=True)
    r.add_argument("--camera", required=True)
    r.add_argument("--frames", required=True, metavar="T0:T1:DT")
    r.add_argument("--ss", type=int, default=1, help="supersampling factor n (n*n samples)")
    r.add_argument("--shadows", action=argparse.BooleanOptionalAction, default=True)
    r.add_argument("--gain", type=float, default=1.0)
    r.add_argument("--bit-depth", type=int, default=8, choices=(8, 16))
    r.add_argument("--read-noise", type=float, default=0.0, help="Gaussian read noise (DN)")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)

    fl = sub.add_parser("flow", parents=[common], help="ground-truth flow for a rendered sequence")
    fl.add_argument("--frames", required=True, help="directory written by 'render'")
    fl.add_argument("--camera")
    fl.set_defaults(fn=cmd_flow)

    iv = sub.add_parser("invert-los", parents=[common], help="poses from landmark bearings")
    iv.add_argument("--los", required=True)
    iv.add_argument("--landmarks", required=True)
    iv.add_argument("--initial", required=True, help="trajectory CSV, row k = frame k")
    iv.add_argument("--out", required=True)
    iv.set_defaults(fn=cmd_invert_los)

    cap = sub.add_parser("capture", help="model capture").add_subparsers(dest="action", required=True)
    cf = cap.add_parser("fit", parents=[common], help="fit Hapke parameters to reference images")
    cf.add_argument("--refs", required=True, help="directory written by 'render'")
    cf.add_argument("--scene", required=True)
    cf.add_argument("--camera")
    cf.add_argument("--free", default="w")
    cf.add_argument("--max-iters", type=int, default=200)
    cf.add_argument("--step-tolerance", type=float, default=1e-6)
    cf.add_argument("--out", required=True)
    cf.set_defaults(fn=cmd_capture_fit)
    ct = cap.add_parser("texture", parents=[common], help="back-project images to an albedo grid")
    ct.add_argument("--refs", required=True)
    ct.add_argument("--scene", required=True)
    ct.add_argument("--camera")
    ct.add_argument("--out", required=True)
    ct.set_defaults(fn=cmd_capture_texture)

    be = sub.add_parser("bench", help="flow benchmark").add_subparsers(dest="action", required=True)
    e = be.add_parser("epe", parents=[common], help="end-point error of predicted flow")
    e.add_argument("--pred", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_bench_epe)

    ds = sub.add_parser("dataset", help="dataset manifests").add_subparsers(dest="action", required=True)
    v = ds.add_parser("validate", parents=[common], help="check files, counts and ground truth")
    v.add_argument("manifest")
    v.add_argument("--metadata-only", action="store_true")
    v.add_argument("--all-flows", action="store_true", help="check every flow pair, not a sample")
    v.add_argument("--out")
    v.set_defaults(fn=cmd_dataset_validate)
    c = ds.add_parser("catalogue", parents=[common], help="list or materialise catalogued datasets")
    c.add_argument("dataset_id", nargs="?")
    c.add_argument("--out")
    c.set_defaults(fn=cmd_dataset_catalogue)

    ru = sub.add_parser("run", parents=[common], help="full pipeline from a run config")
    ru.add_argument("config")
    ru.add_argument("--out")
    ru.set_defaults(fn=cmd_run)

    de = sub.add_parser("demo", parents=[common], help="generate and run the bundled miniature scene")
    de.add_argument("--dir", default="lunagen-demo")
    de.add_argument("--out")
    de.set_defaults(fn=cmd_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_ERROR
        # must happen before numba starts its pool; modules are imported lazily
        os.environ.setdefault("NUMBA_NUM_THREADS", str(args.threads))
    if args.seed is None and args.command not in ("run", "demo"):
        args.seed = 0
    from .pipeline import PipelineError, ValidationFailure

    try:
        return args.fn(args)
    except ValidationFailure as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
