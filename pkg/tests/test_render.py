import math

import numpy as np
import pytest

from lunagen.dem import DemGrid
from lunagen.geom import CameraModel, Ray, Trajectory, look_at, nadir_pose
from lunagen.procedural import BoulderField
from lunagen.render import (HapkeParams, RenderConfig, RenderError, Scene, hapke_brdf,
                            hapke_reflectance, read_depth,
                            read_image, render_frame, render_gbuffer, render_radiance,
                            render_trajectory, shade, to_digital, trace_ray, trace_rays, worker_threads)
from lunagen.render.frame import STATE_FILE, parse_frame_times

from oracles import hit_hemispheres, march_terrain


def flat_scene(n=65, cs=2.0, h=0.0, **kw):
    half = (n - 1) * cs / 2
    return Scene(DemGrid(np.full((n, n), h), cs, (-half, half)), **kw)


def test_trace_flat_straight_down():
    hit = trace_ray(flat_scene(), Ray([0, 0, 100], [0, 0, -1]))
    assert abs(hit.t - 100) < 1e-9 and np.allclose(hit.normal, [0, 0, 1]) and hit.is_terrain


def test_trace_escape():
    assert trace_ray(flat_scene(), Ray([0, 0, 100], [0, 0, 1])) is None
    assert trace_ray(flat_scene(), Ray([0, 0, 100], [1, 0, 0])) is None


def test_trace_plane_h_equals_x():
    dem = DemGrid.from_function(41, 41, 1.0, (-20.0, 20.0), lambda x, y: x)
    hit = trace_ray(Scene(dem), Ray([0, 0, 10], [0, 0, -1]))
    assert abs(hit.t - 10) < 1e-9 and np.allclose(hit.point, 0, atol=1e-9)
    assert np.allclose(hit.normal, np.array([-1, 0, 1]) / math.sqrt(2))


def test_trace_boulder_hemisphere():
    scene = flat_scene(boulders=BoulderField([[0.0, 0.0]], [5.0]))
    hit = trace_ray(scene, Ray([0, 0, 100], [0, 0, -1]))
    assert abs(hit.t - 95) < 1e-9 and hit.object == 0
    hit = trace_ray(scene, Ray([3, 0, 100], [0, 0, -1]))
    assert abs(hit.t - 96) < 1e-9 and np.allclose(hit.normal, [0.6, 0, 0.8])


def test_trace_matches_brute_force_marcher(rolling_scene):
    rng = np.random.default_rng(5)
    dem = rolling_scene.dem
    n = 2000
    o = np.column_stack([rng.uniform(-20, 208, n), rng.uniform(-20, 208, n), rng.uniform(15, 60, n)])
    az, el = rng.uniform(0, 2 * np.pi, n), np.radians(rng.uniform(5, 90, n))
    d = np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), -np.sin(el)])
    t, obj = trace_rays(rolling_scene, o, d)
    b = rolling_scene.boulders
    ref = np.minimum(march_terrain(dem.heights, *dem.origin, dem.cell_size, o, d),
                     hit_hemispheres(b.centers, rolling_scene.boulder_base_heights, b.radii, o, d))
    assert np.array_equal(np.isfinite(t), np.isfinite(ref))
    hit = np.isfinite(ref)
    assert np.max(np.abs(t[hit] - ref[hit])) <= dem.cell_size / 4
    assert np.any(obj >= 0)


def test_shade_zenith_nadir_flat():
    scene = flat_scene()
    ray = Ray([0, 0, 50], [0, 0, -1])
    L = shade(scene, trace_ray(scene, ray), ray)
    assert math.isclose(L, 1361.0 * hapke_brdf(HapkeParams(), 1.0, 1.0, 0.0), rel_tol=1e-12)


def test_shade_terminator_and_boulder_shadow():
    low_sun = flat_scene(sun_direction=(0.0, math.cos(0.3), -math.sin(0.3)))
    ray = Ray([0, 0, 50], [0, 0, -1])
    assert shade(low_sun, trace_ray(low_sun, ray), ray) == 0.0
    s = math.sqrt(0.5)
    scene = flat_scene(boulders=BoulderField([[10.0, 0.0]], [4.0]), sun_direction=(s, 0.0, s))
    ray = Ray([8, 0, 50], [0, 0, -1])
    ray_shadowed = Ray([4.5, 0, 50], [0, 0, -1])
    assert shade(scene, trace_ray(scene, ray_shadowed), ray_shadowed) == 0.0
    assert shade(scene, trace_ray(scene, ray_shadowed), ray_shadowed, shadows=False) > 0.0
    far = Ray([-20, 0, 50], [0, 0, -1])
    assert shade(scene, trace_ray(scene, far), far) > 0.0
    assert trace_ray(scene, ray).object == 0


def test_flat_nadir_frame_uniform_and_depth():
    # narrow field of view: view and phase angles barely change across the frame
    scene = flat_scene(n=129, cs=10.0)
    cam = CameraModel.from_fov(65, 65, 0.2)
    img, depth = render_frame(scene, cam, nadir_pose([0, 0, 1000]),
                              RenderConfig(supersampling=2, gain=1.2))
    assert 40 < img.min() and int(img.max()) - int(img.min()) <= 1
    assert abs(depth[32, 32] - 1000.0) < 1e-6


def test_depth_is_inf_on_miss():
    scene = flat_scene()
    cam = CameraModel.from_fov(32, 32, 60.0)
    _, depth = render_frame(scene, cam, look_at([0, -60, 5], [0, 200, 5], up=(0, 0, 1)), RenderConfig())
    assert np.all(np.isinf(depth[:10])) and np.all(np.isfinite(depth[-5:]))


def test_camera_below_terrain_rejected():
    with pytest.raises(RenderError):
        render_frame(flat_scene(h=10.0), CameraModel.from_fov(8, 8, 40), nadir_pose([0, 0, 5]),
                     RenderConfig())


def test_config_validation():
    for kw in ({"supersampling": 0}, {"gain": 0.0}, {"bit_depth": 12}, {"read_noise_dn": -1}):
        with pytest.raises(RenderError):
            RenderConfig(**kw)


def test_thread_count_does_not_change_pixels(rolling_scene):
    cam = CameraModel.from_fov(96, 80, 55.0)
    pose = look_at([40, 20, 90], [100, 110, 0])
    cfg = RenderConfig(supersampling=3, gain=8.0, seed=99)
    with worker_threads(1):
        a, da = render_frame(rolling_scene, cam, pose, cfg, frame=3)
    b, db = render_frame(rolling_scene, cam, pose, cfg, frame=3, threads=4)
    assert a.tobytes() == b.tobytes() and da.tobytes() == db.tobytes()


def test_gain_is_linear(rolling_scene):
    cam = CameraModel.from_fov(40, 40, 55.0)
    pose = look_at([40, 20, 90], [100, 110, 0])
    rad, _ = render_radiance(rolling_scene, cam, pose, RenderConfig(supersampling=2))
    assert np.array_equal(2.0 * (3.0 * rad), 6.0 * rad)
    lo = to_digital(rad, RenderConfig(gain=3.0, bit_depth=16)).astype(float)
    hi = to_digital(rad, RenderConfig(gain=6.0, bit_depth=16)).astype(float)
    assert np.all(np.abs(hi - 2 * lo) <= 1)


def test_seed_changes_jitter_only_with_supersampling(rolling_scene):
    cam = CameraModel.from_fov(32, 32, 55.0)
    pose = look_at([40, 20, 90], [100, 110, 0])
    r1, _ = render_radiance(rolling_scene, cam, pose, RenderConfig(seed=1))
    r2, _ = render_radiance(rolling_scene, cam, pose, RenderConfig(seed=2))
    assert np.array_equal(r1, r2)
    s1, _ = render_radiance(rolling_scene, cam, pose, RenderConfig(supersampling=2, seed=1))
    s2, _ = render_radiance(rolling_scene, cam, pose, RenderConfig(supersampling=2, seed=2))
    assert not np.array_equal(s1, s2)


def test_read_noise_is_deterministic():
    rad = np.full((64, 64), 50.0)
    cfg = RenderConfig(read_noise_dn=2.0, seed=4)
    a, b = to_digital(rad, cfg, frame=1), to_digital(rad, cfg, frame=1)
    assert np.array_equal(a, b) and not np.array_equal(a, to_digital(rad, cfg, frame=2))
    assert abs(a.astype(float).std() - 2.0) < 0.3


def test_albedo_texture_scales_radiance(rolling_scene):
    cam = CameraModel.from_fov(32, 32, 55.0)
    pose = look_at([40, 20, 90], [100, 110, 0])
    cfg = RenderConfig()
    plain, _ = render_radiance(rolling_scene.replace(boulders=BoulderField.empty()), cam, pose, cfg)
    tex = np.full(rolling_scene.dem.heights.shape, 0.5)
    half, _ = render_radiance(rolling_scene.replace(boulders=BoulderField.empty(), albedo_texture=tex),
                              cam, pose, cfg)
    assert np.allclose(half, 0.5 * plain, rtol=1e-12, atol=0)


def test_gbuffer_reproduces_radiance(rolling_scene):
    cam = CameraModel.from_fov(24, 24, 55.0)
    pose = look_at([40, 20, 90], [100, 110, 0])
    cfg = RenderConfig(supersampling=2, seed=3)
    rad, _ = render_radiance(rolling_scene, cam, pose, cfg, frame=5)
    gb = render_gbuffer(rolling_scene, cam, pose, 2, True, 3, 5)
    r = np.zeros(gb.mu0.shape)
    r[gb.lit] = hapke_reflectance(rolling_scene.hapke, gb.mu0[gb.lit], gb.mu[gb.lit], gb.phase[gb.lit])
    pred = rolling_scene.sun_irradiance * (r * gb.albedo).mean(axis=-1)
    assert np.allclose(pred, rad, rtol=1e-12, atol=1e-12)


def test_parse_frame_times():
    assert parse_frame_times("0:1:0.25") == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert parse_frame_times("0:0.9:0.3") == pytest.approx([0.0, 0.3, 0.6, 0.9])
    with pytest.raises(ValueError):
        parse_frame_times("0:1:0")


def _descent(n=11):
    return Trajectory.from_samples(
        [(float(k), look_at([60.0 + k, 40.0 + 2 * k, 110.0 - 3 * k], [100.0, 110.0, 0.0]))
         for k in range(n)])


def test_render_trajectory_empty_and_single(rolling_scene, tmp_path):
    cam = CameraModel.from_fov(24, 24, 50.0)
    cfg = RenderConfig(gain=8.0)
    assert render_trajectory(rolling_scene, cam, _descent(), [], cfg, tmp_path / "e") == []
    recs = render_trajectory(rolling_scene, cam, _descent(), [2.5], cfg, tmp_path / "one")
    from lunagen.geom import interpolate_pose
    img, depth = render_frame(rolling_scene, cam, interpolate_pose(_descent(), 2.5), cfg)
    assert np.array_equal(read_image(tmp_path / "one" / recs[0]["image"]), img)
    assert np.array_equal(read_depth(tmp_path / "one" / recs[0]["depth"]), depth.astype(np.float32))


def test_render_trajectory_resume(rolling_scene, tmp_path):
    import json
    cam = CameraModel.from_fov(24, 24, 50.0)
    cfg = RenderConfig(gain=8.0)
    times = [0.0, 1.0, 2.0]
    recs = render_trajectory(rolling_scene, cam, _descent(), times, cfg, tmp_path)
    assert json.loads((tmp_path / STATE_FILE).read_text())["complete"] is True
    stamps = {r["image"]: (tmp_path / r["image"]).stat().st_mtime_ns for r in recs}
    (tmp_path / recs[1]["image"]).write_bytes(b"corrupt")
    again = render_trajectory(rolling_scene, cam, _descent(), times, cfg, tmp_path)
    assert again == recs
    assert (tmp_path / recs[0]["image"]).stat().st_mtime_ns == stamps[recs[0]["image"]]
    assert read_image(tmp_path / recs[1]["image"]).shape == (24, 24)
    # a different configuration invalidates everything
    render_trajectory(rolling_scene, cam, _descent(), times, RenderConfig(gain=9.0), tmp_path)
    assert (tmp_path / recs[0]["image"]).stat().st_mtime_ns != stamps[recs[0]["image"]]


def test_fifty_frame_descent_over_demo_terrain(tmp_path):
    from lunagen.pipeline import demo_trajectory, load_scene, run_pipeline, write_demo, load_config
    config, base = load_config(write_demo(tmp_path))
    config["frames"] = "0:1:1"
    run_pipeline(config, base, tmp_path / "out")
    scene = load_scene(tmp_path / "out" / "terrain" / "scene.json")
    cam = CameraModel.from_fov(64, 64, 50.0)
    times = list(np.linspace(0.0, 10.0, 50))
    recs = render_trajectory(scene, cam, demo_trajectory(), times, RenderConfig(gain=12.0),
                             tmp_path / "descent")
    assert len(recs) == 50
    for r in recs:
        d = read_depth(tmp_path / "descent" / r["depth"])
        assert np.all(np.isfinite(d[31:33, 31:33]))
