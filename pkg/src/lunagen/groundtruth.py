"""Geometric ground truth: dense optical flow and pose recovery from bearings."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .geom import CameraModel, Pose, Trajectory, backproject, world_to_camera

log = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
FLO_INVALID = 1e9


class FlowError(ValueError):
    pass


class UnobservableFrameError(ValueError):
    pass


@dataclass(frozen=True)
class FlowField:
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if u.ndim != 2 or u.shape != v.shape or u.shape != valid.shape:
            raise FlowError("u, v and valid must be 2-D arrays of one shape")
        if not (np.all(np.isfinite(u[valid])) and np.all(np.isfinite(v[valid]))):
            raise FlowError("flow must be finite on valid pixels")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]


def default_occlusion_tol(depth):
    return np.maximum(0.5, 1e-3 * depth)


def bilinear_sample(img: np.ndarray, x, y):
    """Bilinear lookup at fractional pixel coordinates inside [0, W-1] x [0, H-1]."""
    h, w = img.shape
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    with np.errstate(invalid="ignore"):
        # exact zero weights must not pull in inf neighbours
        top = np.where(fx == 0, img[y0, x0], np.where(fx == 1, img[y0, x1],
                       img[y0, x0] * (1 - fx) + img[y0, x1] * fx))
        bot = np.where(fx == 0, img[y1, x0], np.where(fx == 1, img[y1, x1],
                       img[y1, x0] * (1 - fx) + img[y1, x1] * fx))
        return np.where(fy == 0, top, np.where(fy == 1, bot, top * (1 - fy) + bot * fy))


def compute_flow(depth_a: np.ndarray, pose_a: Pose, pose_b: Pose, camera: CameraModel,
                 depth_b: np.ndarray, occlusion_tol=None) -> FlowField:
    """Forward flow A -> B at the pixel centres of A.

    Depth maps hold camera-frame z (metres, +inf where nothing was hit). A
    pixel is valid when its reprojection lands inside B, in front of B, and
    agrees with B's depth within ``occlusion_tol`` (metres, scalar or None for
    ``max(0.5, 1e-3 * depth)``).
    """
    depth_a = np.asarray(depth_a, dtype=np.float64)
    depth_b = np.asarray(depth_b, dtype=np.float64)
    shape = (camera.height, camera.width)
    if depth_a.shape != shape or depth_b.shape != shape:
        raise FlowError(f"depth maps must be {shape}, got {depth_a.shape} and {depth_b.shape}")

    vs, us = np.nonzero(np.isfinite(depth_a) & (depth_a > 0))
    if (np.array_equal(pose_a.position, pose_b.position)
            and np.array_equal(pose_a.attitude, pose_b.attitude)):
        # identical poses: skip the round trip so the flow is exactly zero
        valid = np.zeros(shape, dtype=bool)
        valid[vs, us] = True
        return FlowField(np.zeros(shape), np.zeros(shape), valid)
    pix = np.stack([us, vs], axis=-1).astype(np.float64)
    X = backproject(camera, pose_a, pix, depth_a[vs, us])
    xc = world_to_camera(pose_b, X)
    zb = xc[:, 2]
    front = zb > 1e-9
    zs = np.where(front, zb, 1.0)
    ub = camera.fx * xc[:, 0] / zs + camera.cx
    vb = camera.fy * xc[:, 1] / zs + camera.cy
    inside = front & (ub >= 0) & (ub <= camera.width - 1) & (vb >= 0) & (vb <= camera.height - 1)
    ok = np.zeros(len(us), dtype=bool)
    idx = np.nonzero(inside)[0]
    db = bilinear_sample(depth_b, ub[idx], vb[idx])
    tol = default_occlusion_tol(zb[idx]) if occlusion_tol is None else occlusion_tol
    with np.errstate(invalid="ignore"):
        ok[idx] = np.abs(zb[idx] - db) <= tol

    u = np.zeros(shape)
    v = np.zeros(shape)
    valid = np.zeros(shape, dtype=bool)
    vs, us = vs[ok], us[ok]
    u[vs, us] = ub[ok] - us
    v[vs, us] = vb[ok] - vs
    valid[vs, us] = True
    return FlowField(u, v, valid)


def warp_image(image: np.ndarray, flow: FlowField) -> np.ndarray:
    """Sample ``image`` (frame B) at p + flow(p): reconstructs frame A on valid pixels."""
    h, w = image.shape
    vs, us = np.mgrid[0:h, 0:w]
    x = np.clip(us + flow.u, 0, w - 1)
    y = np.clip(vs + flow.v, 0, h - 1)
    return bilinear_sample(image.astype(np.float64), x, y)


# ---------------------------------------------------------------------------
# Flow files
# ---------------------------------------------------------------------------

def mask_path(flo_path) -> Path:
    p = Path(flo_path)
    return p.with_name(p.stem + "_valid.png")


def write_flo(path, flow: FlowField) -> None:
    """Middlebury .flo with a 1e9 sentinel for invalid pixels plus a PNG mask."""
    data = np.stack([np.where(flow.valid, flow.u, FLO_INVALID),
                     np.where(flow.valid, flow.v, FLO_INVALID)], axis=-1).astype("<f4")
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([flow.width, flow.height], dtype="<i4").tofile(f)
        data.tofile(f)
    Image.fromarray(flow.valid.astype(np.uint8) * 255).save(mask_path(path), format="PNG")


def read_flo(path) -> FlowField:
    with open(path, "rb") as f:
        magic = np.fromfile(f, "<f4", count=1)
        if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
            raise FlowError(f"{path}: bad .flo magic number")
        dims = np.fromfile(f, "<i4", count=2)
        if dims.size != 2 or np.any(dims < 1):
            raise FlowError(f"{path}: bad .flo header")
        w, h = int(dims[0]), int(dims[1])
        data = np.fromfile(f, "<f4", count=2 * w * h)
    if data.size != 2 * w * h:
        raise FlowError(f"{path}: truncated .flo payload")
    data = data.reshape(h, w, 2).astype(np.float64)
    valid = np.abs(data[..., 0]) < FLO_INVALID / 2
    mp = mask_path(path)
    if mp.exists():
        with Image.open(mp) as im:
            valid &= np.array(im) > 0
    u = np.where(valid, data[..., 0], 0.0)
    v = np.where(valid, data[..., 1], 0.0)
    return FlowField(u, v, valid)


# ---------------------------------------------------------------------------
# Pose from line-of-sight bearings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LosObservation:
    frame_id: int
    landmark_id: str
    direction: np.ndarray  # unit vector, camera frame, camera -> landmark

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("LOS direction must be unit norm")
        object.__setattr__(self, "direction", d)


LandmarkSet = Mapping[str, np.ndarray]


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def los_residuals(position, R_wc, directions, points) -> np.ndarray:
    """Stacked (n*3,) residuals d_obs - normalize(R_cw (X - p))."""
    y = (np.asarray(points) - position) @ R_wc
    f = y / np.linalg.norm(y, axis=1, keepdims=True)
    return (np.asarray(directions) - f).ravel()


def los_jacobian(position, R_wc, points) -> np.ndarray:
    """d residual / d (dp, dtheta) with R_wc <- R_wc @ exp([dtheta]x)."""
    y = (np.asarray(points) - position) @ R_wc
    J = np.empty((3 * len(y), 6))
    for k, yk in enumerate(y):
        n = np.linalg.norm(yk)
        f = yk / n
        dfdy = (np.eye(3) - np.outer(f, f)) / n
        J[3 * k:3 * k + 3, :3] = dfdy @ R_wc.T
        J[3 * k:3 * k + 3, 3:] = -dfdy @ _skew(yk)
    return J


def _check_observable(points: np.ndarray, frame_id) -> None:
    if len(points) < 3:
        raise UnobservableFrameError(f"frame {frame_id}: {len(points)} landmarks, need >= 3")
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise UnobservableFrameError(f"frame {frame_id}: landmarks are collinear")


def solve_frame(directions, points, initial: Pose, max_iters: int = 100,
                step_tol: float = 1e-10, frame_id=None) -> tuple[Pose, dict]:
    """Levenberg-damped Gauss-Newton resection of one camera pose."""
    directions = np.asarray(directions, dtype=float)
    points = np.asarray(points, dtype=float)
    _check_observable(points, frame_id)
    p = initial.position.copy()
    R = initial.R_wc
    r = los_residuals(p, R, directions, points)
    cost = r @ r
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        J = los_jacobian(p, R, points)
        A = J.T @ J
        g = J.T @ r
        step = None
        while lam < 1e12:
            delta = np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), -g)
            p_new = p + delta[:3]
            R_new = R @ Rotation.from_rotvec(delta[3:]).as_matrix()
            r_new = los_residuals(p_new, R_new, directions, points)
            c_new = r_new @ r_new
            if c_new <= cost:
                step = delta
                p, R, r, cost = p_new, R_new, r_new, c_new
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        if step is None or np.linalg.norm(step) < step_tol:
            converged = True
            break
    if not converged:
        log.warning("LOS inversion for frame %s did not converge", frame_id)
    rms = float(np.sqrt(cost / len(points)))
    return Pose.from_matrix(p, R), {"frame_id": frame_id, "rms": rms, "iterations": it,
                                    "converged": converged, "n_obs": len(points)}


def invert_los(observations: Sequence[LosObservation], landmarks: LandmarkSet,
               initial: Mapping[int, Pose], times: Mapping[int, float] | None = None):
    """Recover one pose per frame from landmark bearings.

    Frames are solved independently. Returns ``(trajectory, report)`` where the
    report lists per-frame RMS residuals and convergence flags. Timestamps come
    from ``times`` or default to the frame id.
    """
    by_frame: dict[int, list[LosObservation]] = {}
    for ob in observations:
        by_frame.setdefault(ob.frame_id, []).append(ob)
    samples, report = [], []
    for fid in sorted(by_frame):
        obs = by_frame[fid]
        if fid not in initial:
            raise KeyError(f"no initial pose for frame {fid}")
        missing = [o.landmark_id for o in obs if o.landmark_id not in landmarks]
        if missing:
            raise KeyError(f"frame {fid}: unknown landmarks {missing}")
        dirs = np.array([o.direction for o in obs])
        pts = np.array([landmarks[o.landmark_id] for o in obs], dtype=float)
        pose, rep = solve_frame(dirs, pts, initial[fid], frame_id=fid)
        t = float(times[fid]) if times is not None else float(fid)
        samples.append((t, pose))
        report.append(rep)
    return Trajectory.from_samples(samples), report


def synthesize_los(pose: Pose, landmarks: LandmarkSet, frame_id: int) -> list[LosObservation]:
    out = []
    for lid in sorted(landmarks):
        y = world_to_camera(pose, landmarks[lid])
        out.append(LosObservation(frame_id, lid, y / np.linalg.norm(y)))
    return out


def read_los_csv(path) -> list[LosObservation]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    out = []
    for row in rows:
        d = np.array([float(row["dx"]), float(row["dy"]), float(row["dz"])])
        out.append(LosObservation(int(row["frame_id"]), row["landmark_id"], d / np.linalg.norm(d)))
    return out


def write_los_csv(path, observations: Sequence[LosObservation]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame_id", "landmark_id", "dx", "dy", "dz"])
        for o in observations:
            w.writerow([o.frame_id, o.landmark_id, *(repr(float(c)) for c in o.direction)])


def read_landmarks_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as f:
        return {row["landmark_id"]: np.array([float(row["x"]), float(row["y"]), float(row["z"])])
                for row in csv.DictReader(f)}


def write_landmarks_csv(path, landmarks: LandmarkSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["landmark_id", "x", "y", "z"])
        for lid in sorted(landmarks):
            w.writerow([lid, *(repr(float(c)) for c in landmarks[lid])])
