"""Camera and pose math shared by every stage of the pipeline.

Conventions
-----------
World frame: local Cartesian, metres, +z up, +y north.
Camera frame: +z forward (boresight), +x right, +y down.
Pixels: (0, 0) is the centre of the top-left pixel, u grows right, v grows down.
Attitude: unit quaternion (w, x, y, z) rotating camera-frame vectors into the
world frame, i.e. ``x_world = R(q) @ x_cam + position``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

BEHIND_EPS = 1e-9


class BehindCameraError(ValueError):
    pass


class InvalidDepthError(ValueError):
    pass


class OutOfRangeError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraModel:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("camera dimensions must be >= 1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraModel":
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(width, height, f, f, (width - 1) / 2, (height - 1) / 2)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "fx": self.fx,
                "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
                   float(d["cx"]), float(d["cy"]))


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    attitude: np.ndarray  # (w, x, y, z), camera -> world

    def __post_init__(self):
        p = _frozen(self.position).reshape(3)
        q = _frozen(self.attitude).reshape(4)
        if not np.all(np.isfinite(p)):
            raise ValueError("pose position must be finite")
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"attitude quaternion not unit norm (|q| = {n!r})")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "attitude", q)

    @classmethod
    def from_rotation(cls, position, rotation: Rotation) -> "Pose":
        x, y, z, w = rotation.as_quat()
        q = np.array([w, x, y, z])
        q /= np.linalg.norm(q)
        return cls(position, q)

    @classmethod
    def from_matrix(cls, position, R_wc) -> "Pose":
        return cls.from_rotation(position, Rotation.from_matrix(R_wc))

    @property
    def rotation(self) -> Rotation:
        w, x, y, z = self.attitude
        return Rotation.from_quat([x, y, z, w])

    @property
    def R_wc(self) -> np.ndarray:
        """Camera-to-world rotation matrix."""
        return self.rotation.as_matrix()

    @property
    def R_cw(self) -> np.ndarray:
        return self.R_wc.T

    def to_dict(self) -> dict:
        return {"position": [float(v) for v in self.position],
                "attitude": [float(v) for v in self.attitude]}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(d["position"], d["attitude"])


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Pose at ``position`` with the boresight pointing at ``target``.

    ``up`` is the world direction that should appear towards the top of the
    image. For a nadir view the default (north) gives north-up images.
    """
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    x = np.cross(z, up)  # camera +y is down, so right = forward x up
    if np.linalg.norm(x) < 1e-12:
        raise ValueError("up vector parallel to the viewing direction")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_matrix(position, np.column_stack([x, y, z]))


def nadir_pose(position) -> Pose:
    """Straight-down camera, image top towards +y (north)."""
    return Pose(position, [0.0, 1.0, 0.0, 0.0])


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    poses: tuple[Pose, ...] = field(repr=False)

    def __post_init__(self):
        t = _frozen(self.times).reshape(-1)
        if len(t) < 1:
            raise ValueError("trajectory needs at least one sample")
        if len(t) != len(self.poses):
            raise ValueError("times and poses differ in length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "poses", tuple(self.poses))

    @classmethod
    def from_samples(cls, samples: Sequence[tuple[float, Pose]]) -> "Trajectory":
        return cls(np.array([s[0] for s in samples], dtype=float), tuple(s[1] for s in samples))

    def __len__(self) -> int:
        return len(self.times)

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _frozen(self.origin).reshape(3)
        d = _frozen(self.direction).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    @classmethod
    def towards(cls, origin, direction) -> "Ray":
        d = np.asarray(direction, dtype=float)
        return cls(origin, d / np.linalg.norm(d))


def world_to_camera(pose: Pose, points: np.ndarray) -> np.ndarray:
    """Map world points (..., 3) into the camera frame."""
    points = np.asarray(points, dtype=float)
    return (points - pose.position) @ pose.R_wc


def project(camera: CameraModel, pose: Pose, point):
    """Pinhole projection of a world point.

    Returns ``(pixel, depth)`` where depth is the camera-frame z. Pixels
    outside the image are returned as-is; bounds are the caller's problem.
    """
    xc = world_to_camera(pose, point)
    z = xc[..., 2]
    if np.any(z <= BEHIND_EPS):
        raise BehindCameraError("point at or behind the camera plane")
    u = camera.fx * xc[..., 0] / z + camera.cx
    v = camera.fy * xc[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1), z


def backproject(camera: CameraModel, pose: Pose, pixel, depth):
    """Inverse of :func:`project` for a pixel and camera-frame depth."""
    pixel = np.asarray(pixel, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(~(depth > 0)):
        raise InvalidDepthError("depth must be positive")
    x = (pixel[..., 0] - camera.cx) / camera.fx * depth
    y = (pixel[..., 1] - camera.cy) / camera.fy * depth
    xc = np.stack([x, y, depth * np.ones_like(x)], axis=-1)
    return xc @ pose.R_wc.T + pose.position


def pixel_rays(camera: CameraModel, pixels) -> np.ndarray:
    """Unit camera-frame directions through the given pixel coordinates."""
    pixels = np.asarray(pixels, dtype=float)
    d = np.stack([(pixels[..., 0] - camera.cx) / camera.fx,
                  (pixels[..., 1] - camera.cy) / camera.fy,
                  np.ones(pixels.shape[:-1])], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _slerp(q0: np.ndarray, q1: np.ndarray, a: float) -> np.ndarray:
    if np.dot(q0, q1) < 0:
        q1 = -q1
    d = min(1.0, float(np.dot(q0, q1)))
    theta = np.arccos(d)
    if theta < 1e-12:
        q = (1 - a) * q0 + a * q1
    else:
        s = np.sin(theta)
        q = np.sin((1 - a) * theta) / s * q0 + np.sin(a * theta) / s * q1
    return q / np.linalg.norm(q)


def interpolate_pose(traj: Trajectory, t: float) -> Pose:
    """Linear position / slerp attitude between the bracketing samples."""
    t0, t1 = traj.span
    if not (t0 <= t <= t1):
        raise OutOfRangeError(f"t={t} outside trajectory span [{t0}, {t1}]")
    i = int(np.searchsorted(traj.times, t, side="right")) - 1
    if traj.times[i] == t:
        return traj.poses[i]
    a = (t - traj.times[i]) / (traj.times[i + 1] - traj.times[i])
    pa, pb = traj.poses[i], traj.poses[i + 1]
    pos = (1 - a) * pa.position + a * pb.position
    return Pose(pos, _slerp(pa.attitude, pb.attitude, a))


TRAJ_HEADER = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz"]


def write_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRAJ_HEADER)
        for t, p in zip(traj.times, traj.poses):
            w.writerow([repr(float(v)) for v in (t, *p.position, *p.attitude)])


def read_trajectory(path) -> Trajectory:
    with open(Path(path), newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != TRAJ_HEADER:
            raise ValueError(f"trajectory header must be {','.join(TRAJ_HEADER)}")
        samples = []
        for row in reader:
            q = np.array([float(row[k]) for k in ("qw", "qx", "qy", "qz")])
            if abs(np.linalg.norm(q) - 1.0) > 1e-9:
                q = q / np.linalg.norm(q)
            samples.append((float(row["t"]), Pose([float(row[k]) for k in ("px", "py", "pz")], q)))
    return Trajectory.from_samples(samples)
