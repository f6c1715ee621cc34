import numpy as np
import pytest

from lunagen.capture import (CaptureError, CaptureProblem, NoSignalError, TexelGrid,
                             backproject_textures, fd_gradient, fit_brdf, loss_at)
from lunagen.dem import read_raster
from lunagen.geom import CameraModel, look_at
from lunagen.render import HapkeParams, RenderConfig, render_frame

CAM = CameraModel.from_fov(64, 64, 60.0)
CFG = RenderConfig(supersampling=1, gain=60.0, bit_depth=16)
POSES = [look_at((40 + 50 * k, 30, 120), (94, 110, 0)) for k in range(3)]


def references(scene, poses=POSES, cfg=CFG):
    return [(render_frame(scene, CAM, p, cfg, frame=k)[0], p, k) for k, p in enumerate(poses)]


@pytest.fixture(scope="module")
def textured(rolling_scene):
    a = 0.8
    scene = rolling_scene.replace(albedo_texture=np.full(rolling_scene.dem.heights.shape, a))
    cfg = RenderConfig(supersampling=1, gain=2000.0, bit_depth=16)
    views = [(im, p) for im, p, _ in references(scene, POSES[:2], cfg)]
    return a, rolling_scene, views, cfg


def test_uniform_albedo_recovered(textured):
    a, scene, views, cfg = textured
    grid = backproject_textures(views, CAM, scene, cfg.gain, full_scale=cfg.full_scale)
    assert grid.valid.sum() > 100
    assert np.max(np.abs(grid.albedo[grid.valid] - a)) < 1e-3
    assert np.all(grid.albedo[~grid.valid] == 0) and np.all(grid.weight >= 0)


def test_unobserved_texels_invalid(textured):
    _, scene, views, cfg = textured
    grid = backproject_textures(views[:1], CAM, scene, cfg.gain)
    # the far corner of the DEM is outside the 60 degree view
    assert not grid.valid.all()
    assert not grid.valid[-1, -1] and grid.weight[-1, -1] == 0


def test_redundant_views_and_ordering(textured):
    _, scene, views, cfg = textured
    one = backproject_textures(views[:1], CAM, scene, cfg.gain)
    two = backproject_textures([views[0], views[0]], CAM, scene, cfg.gain)
    assert np.array_equal(one.valid, two.valid)
    assert np.max(np.abs(one.albedo - two.albedo)) < 1e-3
    ab = backproject_textures(views, CAM, scene, cfg.gain)
    ba = backproject_textures(views[::-1], CAM, scene, cfg.gain)
    assert np.array_equal(ab.albedo, ba.albedo) and np.array_equal(ab.valid, ba.valid)


def test_no_overlap_is_an_error(rolling_scene):
    away = look_at((94, 110, 50), (94, 110, 200), up=(0, 1, 0))
    with pytest.raises(CaptureError):
        backproject_textures([(np.zeros((64, 64)), away)], CAM, rolling_scene, 1.0)


def test_texel_grid_save(tmp_path):
    valid = np.array([[True, False], [True, True]])
    TexelGrid(np.array([[0.5, 9.0], [1.0, 2.0]]), valid.astype(float), valid).save(tmp_path / "alb.f32")
    heights, _ = read_raster(tmp_path / "alb.f32")
    assert np.allclose(heights, [[0.5, 0.0], [1.0, 2.0]])
    assert (tmp_path / "alb_valid.png").exists()


def test_max_iters_zero_returns_initial(rolling_scene):
    refs = references(rolling_scene.replace(hapke=HapkeParams(w=0.3)))
    r = fit_brdf(CaptureProblem(refs, CAM, rolling_scene.replace(hapke=HapkeParams(w=0.5)), CFG), max_iters=0)
    assert r.hapke.w == 0.5 and len(r.loss_trace) == 1 and r.iterations == 0


def test_dark_references_raise(rolling_scene):
    refs = [(np.zeros((64, 64)), POSES[0])]
    with pytest.raises(NoSignalError):
        fit_brdf(CaptureProblem(refs, CAM, rolling_scene, CFG))


def test_problem_validation(rolling_scene):
    with pytest.raises(CaptureError):
        CaptureProblem([], CAM, rolling_scene, CFG)
    with pytest.raises(CaptureError):
        CaptureProblem([(np.zeros((64, 64)), POSES[0])], CAM, rolling_scene, CFG, ("roughness",))


def test_fit_stays_in_domain_and_trace_monotone(rolling_scene):
    truth = HapkeParams(w=0.9, b=0.5, B0=1.5, h=0.1)
    refs = references(rolling_scene.replace(hapke=truth))
    init = rolling_scene.replace(hapke=HapkeParams(w=0.2, b=-0.6, B0=0.5, h=0.03))
    r = fit_brdf(CaptureProblem(refs, CAM, init, CFG, ("w", "b", "B0", "h", "gain")), max_iters=40)
    HapkeParams(**{k: getattr(r.hapke, k) for k in ("w", "b", "B0", "h")})  # raises if out of domain
    assert r.gain > 0
    assert np.all(np.diff(r.loss_trace) <= 0) and r.loss_trace[-1] < r.loss_trace[0]


def test_truth_is_stationary(rolling_scene):
    truth = HapkeParams(w=0.2, b=-0.3)
    refs = references(rolling_scene.replace(hapke=truth))
    problem = CaptureProblem(refs, CAM, rolling_scene.replace(hapke=HapkeParams(w=0.4, b=0.0)), CFG, ("w", "b"))
    g_init = fd_gradient(problem)
    g_truth = fd_gradient(problem, {"w": 0.2, "b": -0.3, "B0": 1.0, "h": 0.06, "gain": CFG.gain})
    assert np.linalg.norm(g_truth) < 1e-4 * np.linalg.norm(g_init)
    assert loss_at(problem, w=0.2, b=-0.3) < loss_at(problem, w=0.21, b=-0.3)
