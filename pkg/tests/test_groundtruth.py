import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from lunagen.dem import DemGrid
from lunagen.geom import CameraModel, Pose, backproject, look_at, nadir_pose
from lunagen.groundtruth import (FlowError, FlowField, LosObservation, UnobservableFrameError,
                                 compute_flow, invert_los, los_jacobian, los_residuals, mask_path,
                                 read_flo, read_landmarks_csv, read_los_csv, solve_frame,
                                 synthesize_los, warp_image, write_flo, write_landmarks_csv,
                                 write_los_csv)
from lunagen.procedural import BoulderField
from lunagen.render import RenderConfig, Scene, render_frame

CAM = CameraModel(64, 48, 80.0, 80.0, 31.5, 23.5)
LANDMARKS = {"a": np.array([0.0, 0.0, 0.0]), "b": np.array([40.0, 5.0, 2.0]),
             "c": np.array([-10.0, 30.0, -3.0]), "d": np.array([15.0, -25.0, 6.0])}


def plane_depth(Z):
    return np.full((CAM.height, CAM.width), float(Z))


def test_identity_motion_is_zero_flow():
    pose = Pose.from_rotation([1, 2, 3], Rotation.from_euler("xyz", [0.1, -0.2, 0.3]))
    d = plane_depth(20.0)
    d[0, 0] = np.inf
    f = compute_flow(d, pose, pose, CAM, d)
    assert np.all(f.u == 0) and np.all(f.v == 0)
    assert not f.valid[0, 0] and f.valid.sum() == d.size - 1


def test_fronto_parallel_translation():
    Z, delta = 25.0, 0.7
    a = Pose([0, 0, 0], [1, 0, 0, 0])
    b = Pose([delta, 0, 0], [1, 0, 0, 0])
    f = compute_flow(plane_depth(Z), a, b, CAM, plane_depth(Z))
    assert f.valid.any()
    assert np.max(np.abs(f.u[f.valid] + CAM.fx * delta / Z)) < 1e-3
    assert np.max(np.abs(f.v[f.valid])) < 1e-3
    # pixels that leave the image are invalid
    assert not f.valid[:, 0].any() and f.valid[:, -1].all()


def test_pure_rotation_matches_homography():
    a = Pose.from_rotation([5, 5, 5], Rotation.from_euler("xyz", [0.2, 0.1, -0.3]))
    b = Pose.from_rotation([5, 5, 5], a.rotation * Rotation.from_euler("yx", [0.05, -0.03]))
    rng = np.random.default_rng(0)
    depth = rng.uniform(5, 500, size=(CAM.height, CAM.width))
    f = compute_flow(depth, a, b, CAM, depth, occlusion_tol=np.inf)
    R_ba = b.R_cw @ a.R_wc
    v, u = np.mgrid[0:CAM.height, 0:CAM.width]
    p = np.stack([u, v, np.ones_like(u)], axis=-1).astype(float)
    q = p @ (CAM.K @ R_ba @ np.linalg.inv(CAM.K)).T
    q = q[..., :2] / q[..., 2:]
    assert f.valid.sum() > 0.5 * depth.size
    assert np.max(np.abs(q[..., 0] - u - f.u)[f.valid]) < 1e-3
    assert np.max(np.abs(q[..., 1] - v - f.v)[f.valid]) < 1e-3


def test_dimension_mismatch():
    with pytest.raises(FlowError):
        compute_flow(np.ones((3, 3)), nadir_pose([0, 0, 5]), nadir_pose([0, 0, 5]), CAM,
                     plane_depth(1))


def test_occlusion_behind_boulder_is_invalid():
    dem = DemGrid(np.zeros((81, 81)), 1.0, (-40.0, 40.0))
    scene = Scene(dem, BoulderField([[0.0, 0.0]], [3.0]))
    cam = CameraModel.from_fov(64, 64, 60.0)
    a = look_at([-20, 0, 12], [2, 0, 0], up=(0, 0, 1))
    b = look_at([20, 0, 12], [-2, 0, 0], up=(0, 0, 1))
    _, da = render_frame(scene, cam, a, RenderConfig())
    _, db = render_frame(scene, cam, b, RenderConfig())
    f = compute_flow(da, a, b, cam, db)
    # ground points just behind the boulder as seen from B, visible from A
    X = np.array([[-6.0, 0.0, 0.0], [-5.0, 0.3, 0.0]])
    from lunagen.geom import project
    px, _ = project(cam, a, X)
    for u, v in np.round(px).astype(int):
        assert np.isfinite(da[v, u]) and not f.valid[v, u]
    # the boulder's own near face is visible from both, so the mask is not empty
    assert f.valid.sum() > 0.3 * f.valid.size


def test_warp_reproduces_rendered_frame():
    dem = DemGrid.from_function(101, 101, 2.0, (0.0, 200.0),
                                lambda x, y: 3 * np.sin(x / 20) * np.cos(y / 25))
    scene = Scene(dem, sun_direction=(0.3, 0.2, np.sqrt(1 - 0.13)))
    cam = CameraModel.from_fov(96, 96, 40.0)
    cfg = RenderConfig(supersampling=4, gain=14.0)
    a = look_at([90, 90, 80], [100, 100, 0])
    b = look_at([93, 91, 78], [101, 100, 0])
    ia, da = render_frame(scene, cam, a, cfg, frame=0)
    ib, db = render_frame(scene, cam, b, cfg, frame=1)
    f = compute_flow(da, a, b, cam, db)
    err = np.abs(warp_image(ib, f) - ia)[f.valid]
    assert f.valid.mean() > 0.8 and err.mean() < 0.02 * 255


def test_flo_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    valid = rng.random((5, 7)) > 0.3
    f = FlowField(np.where(valid, rng.normal(size=(5, 7)), 0), np.where(valid, rng.normal(size=(5, 7)), 0), valid)
    p = tmp_path / "x.flo"
    write_flo(p, f)
    raw = p.read_bytes()
    assert np.frombuffer(raw[:4], "<f4")[0] == 202021.25
    assert tuple(np.frombuffer(raw[4:12], "<i4")) == (7, 5)
    assert len(raw) == 12 + 8 * 35 and mask_path(p).exists()
    g = read_flo(p)
    assert np.array_equal(g.valid, valid)
    assert np.array_equal(g.u, f.u.astype(np.float32).astype(float))
    # the sentinel alone marks invalid pixels when the mask is absent
    mask_path(p).unlink()
    assert np.array_equal(read_flo(p).valid, valid)


def test_flo_errors(tmp_path):
    p = tmp_path / "bad.flo"
    p.write_bytes(np.array([1.0], "<f4").tobytes() + np.array([2, 2], "<i4").tobytes())
    with pytest.raises(FlowError, match="magic"):
        read_flo(p)
    f = FlowField(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((2, 2), bool))
    write_flo(p, f)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FlowError, match="truncated"):
        read_flo(p)


def test_flow_field_rejects_nonfinite_valid():
    with pytest.raises(FlowError):
        FlowField(np.array([[np.nan]]), np.zeros((1, 1)), np.ones((1, 1), bool))


def random_pose(rng):
    return Pose.from_rotation(rng.normal(size=3) * 20 + [0, 0, 100], Rotation.random(random_state=rng))


def test_los_fixed_point():
    pose = look_at([10, -40, 120], [5, 5, 0])
    obs = synthesize_los(pose, LANDMARKS, 0)
    got, rep = solve_frame([o.direction for o in obs], [LANDMARKS[o.landmark_id] for o in obs], pose)
    assert np.allclose(got.position, pose.position, atol=1e-12) and rep["rms"] < 1e-12


def test_los_round_trip_perturbed():
    rng = np.random.default_rng(2)
    obs, init, truth = [], {}, {}
    for k in range(10):
        pose = look_at(rng.uniform(-30, 30, 3) + [0, 0, 150], rng.uniform(-5, 5, 3))
        truth[k] = pose
        obs += synthesize_los(pose, LANDMARKS, k)
        dp = rng.normal(size=3)
        axis = rng.normal(size=3)
        init[k] = Pose.from_rotation(pose.position + 10 * dp / np.linalg.norm(dp),
                                     pose.rotation * Rotation.from_rotvec(np.radians(5) * axis / np.linalg.norm(axis)))
    traj, report = invert_los(obs, LANDMARKS, init)
    for k, pose in enumerate(traj.poses):
        assert np.linalg.norm(pose.position - truth[k].position) < 1e-6
        assert (pose.rotation.inv() * truth[k].rotation).magnitude() < 1e-8
        assert report[k]["converged"]


def test_los_unobservable():
    pose = look_at([0, 0, 100], [0, 0, 0])
    two = {k: LANDMARKS[k] for k in ("a", "b")}
    with pytest.raises(UnobservableFrameError):
        invert_los(synthesize_los(pose, two, 0), two, {0: pose})
    line = {"p": np.array([0.0, 0, 0]), "q": np.array([1.0, 1, 0]), "r": np.array([2.0, 2, 0])}
    with pytest.raises(UnobservableFrameError):
        invert_los(synthesize_los(pose, line, 0), line, {0: pose})


def test_los_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    pts = np.array(list(LANDMARKS.values()))
    for _ in range(20):
        pose = random_pose(rng)
        p, R = pose.position, pose.R_wc
        dirs = rng.normal(size=(4, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        J = los_jacobian(p, R, pts)
        num = np.empty_like(J)
        h = 1e-6
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            def r(delta):
                return los_residuals(p + delta[:3], R @ Rotation.from_rotvec(delta[3:]).as_matrix(), dirs, pts)
            num[:, i] = (r(e) - r(-e)) / (2 * h)
        assert np.max(np.abs(J - num)) <= 1e-5 * np.max(np.abs(J))


def test_residual_gauge_invariance():
    rng = np.random.default_rng(4)
    pose = random_pose(rng)
    pts = np.array(list(LANDMARKS.values()))
    dirs = rng.normal(size=(4, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    G = Rotation.random(random_state=rng)
    t = rng.normal(size=3) * 30
    r1 = los_residuals(pose.position, pose.R_wc, dirs, pts)
    r2 = los_residuals(G.apply(pose.position) + t, G.as_matrix() @ pose.R_wc, dirs, G.apply(pts) + t)
    assert np.allclose(r1, r2, atol=1e-12)


def test_los_observation_requires_unit_direction():
    with pytest.raises(ValueError):
        LosObservation(0, "a", np.array([0.0, 0.0, 2.0]))


def test_csv_round_trips(tmp_path):
    pose = look_at([10, -40, 120], [5, 5, 0])
    obs = synthesize_los(pose, LANDMARKS, 3)
    write_los_csv(tmp_path / "los.csv", obs)
    assert (tmp_path / "los.csv").read_text().splitlines()[0] == "frame_id,landmark_id,dx,dy,dz"
    back = read_los_csv(tmp_path / "los.csv")
    assert [(o.frame_id, o.landmark_id) for o in back] == [(o.frame_id, o.landmark_id) for o in obs]
    assert np.allclose([o.direction for o in back], [o.direction for o in obs], atol=1e-15)
    write_landmarks_csv(tmp_path / "lm.csv", LANDMARKS)
    lm = read_landmarks_csv(tmp_path / "lm.csv")
    assert set(lm) == set(LANDMARKS) and all(np.array_equal(lm[k], LANDMARKS[k]) for k in lm)
