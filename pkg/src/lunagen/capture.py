"""Model capture on heightfield scenes.

Two tools that pull appearance out of reference images of known geometry:

* :func:`backproject_textures` divides observed pixel values by the predicted
  unit-albedo shading and averages the quotient per DEM cell (weights S^2).
* :func:`fit_brdf` adjusts Hapke parameters (and optionally the camera gain)
  to minimise the mean squared difference between re-rendered and reference
  images. Geometry is fixed, so each reference is traced once into a G-buffer
  and every loss evaluation only re-shades it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .dem import write_raster
from .geom import CameraModel, Pose
from .render import HapkeParams, RenderConfig, Scene, hapke_reflectance, render_gbuffer
from .render._kernels import TERRAIN

log = logging.getLogger(__name__)

PARAMETERS = ("w", "b", "B0", "h", "gain")
_W_MAX = 1.0 - 1e-12
_FD_STEP = 1e-5


class CaptureError(ValueError):
    pass


class NoSignalError(CaptureError):
    pass


@dataclass(frozen=True)
class TexelGrid:
    albedo: np.ndarray  # same shape as the DEM
    weight: np.ndarray
    valid: np.ndarray

    @property
    def resolution(self) -> tuple[int, int]:
        return self.albedo.shape

    def save(self, path) -> None:
        path = Path(path)
        nrows, ncols = self.albedo.shape
        write_raster(path, np.where(self.valid, self.albedo, 0.0),
                     {"ncols": ncols, "nrows": nrows, "cell_size_m": 1.0, "origin_x_m": 0.0,
                      "origin_y_m": 0.0, "nodata": None, "kind": "albedo"})
        Image.fromarray(self.valid.astype(np.uint8) * 255).save(
            path.with_name(path.stem + "_valid.png"), format="PNG")


def _views(views):
    for k, v in enumerate(views):
        if len(v) == 3:
            yield v[0], v[1], int(v[2])
        else:
            yield v[0], v[1], k


def backproject_textures(views: Sequence, camera: CameraModel, scene: Scene, gain: float,
                         threshold_frac: float = 0.01, shadows: bool = True,
                         full_scale: int | None = None) -> TexelGrid:
    """Recover a per-cell albedo multiplier from ``views = [(image, pose), ...]``.

    Only terrain hits that are lit, unshadowed and shaded above
    ``threshold_frac`` of the brightest prediction contribute. Saturated pixels
    (``== full_scale``) are ignored when ``full_scale`` is given.
    """
    unit = scene.replace(albedo_texture=None)
    hp = scene.hapke
    texels, shading, observed = [], [], []
    for image, pose, _ in _views(views):
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (camera.height, camera.width):
            raise CaptureError("image size does not match the camera")
        gb = render_gbuffer(unit, camera, pose, 1, shadows)
        sel = (gb.obj[..., 0] == TERRAIN) & gb.lit[..., 0]
        if full_scale is not None:
            sel &= image < full_scale
        if not sel.any():
            continue
        S = gain * scene.sun_irradiance * hapke_reflectance(
            hp, gb.mu0[..., 0][sel], gb.mu[..., 0][sel], gb.phase[..., 0][sel])
        texels.append(gb.texel[..., 0][sel])
        shading.append(S)
        observed.append(image[sel])
    if not texels:
        raise CaptureError("no terrain observed in any image")
    tex = np.concatenate(texels)
    S = np.concatenate(shading)
    dn = np.concatenate(observed)
    keep = S > threshold_frac * S.max()
    tex, S, dn = tex[keep], S[keep], dn[keep]
    # canonical summation order: the result must not depend on view order
    order = np.lexsort((dn, S, tex))
    tex, S, dn = tex[order], S[order], dn[order]
    n = scene.dem.nrows * scene.dem.ncols
    num = np.bincount(tex, weights=S * dn, minlength=n)
    den = np.bincount(tex, weights=S * S, minlength=n)
    valid = den > 0
    albedo = np.where(valid, num / np.where(valid, den, 1.0), 0.0)
    shape = scene.dem.heights.shape
    return TexelGrid(albedo.reshape(shape), den.reshape(shape), valid.reshape(shape))


# ---------------------------------------------------------------------------
# BRDF fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaptureProblem:
    reference_images: Sequence  # [(image, pose) or (image, pose, frame_index)]
    camera: CameraModel
    scene: Scene  # geometry fixed; scene.hapke is the initial guess
    render: RenderConfig  # sampling used for the references; gain is the initial guess
    free_parameters: tuple[str, ...] = ("w",)

    def __post_init__(self):
        if len(self.reference_images) < 1:
            raise CaptureError("need at least one reference image")
        bad = set(self.free_parameters) - set(PARAMETERS)
        if bad or not self.free_parameters:
            raise CaptureError(f"free parameters must be a non-empty subset of {PARAMETERS}")


@dataclass
class FitResult:
    hapke: HapkeParams
    gain: float
    loss_trace: list[float]
    iterations: int
    converged: bool
    warning: str | None = None
    history: list[dict] = field(default_factory=list)


def _to_z(name, value):
    if name == "w":
        v = min(value, _W_MAX)
        return np.log(v / (1 - v))
    if name == "b":
        return np.arctanh(value)
    if name == "B0":
        return np.log(max(value, 1e-12))
    return np.log(value)  # h, gain


def _from_z(name, z):
    if name == "w":
        return float(min(1.0 / (1.0 + np.exp(-z)), _W_MAX))
    if name == "b":
        return float(np.clip(np.tanh(z), -1 + 1e-12, 1 - 1e-12))
    return float(np.exp(z))


class _Evaluator:
    """Caches reference geometry; evaluates the loss for parameter sets."""

    def __init__(self, problem: CaptureProblem):
        self.problem = problem
        cfg = problem.render
        scene = problem.scene
        self.irradiance = scene.sun_irradiance
        self.parts = []
        total_signal = 0.0
        for image, pose, frame in _views(problem.reference_images):
            image = np.asarray(image, dtype=np.float64)
            if image.shape != (problem.camera.height, problem.camera.width):
                raise CaptureError("reference image size does not match the camera")
            gb = render_gbuffer(scene, problem.camera, pose, cfg.supersampling, cfg.shadows,
                                cfg.seed, frame)
            use = image < cfg.full_scale  # clipped pixels carry no photometric information
            lit = gb.lit & use[..., None]
            self.parts.append({
                "ref": image[use], "use": use, "lit": lit,
                "mu0": gb.mu0[lit], "mu": gb.mu[lit], "g": gb.phase[lit],
                "alb": gb.albedo[lit], "nsamp": gb.mu0.shape[-1],
            })
            total_signal += float(np.sum(image))
        if total_signal <= 0:
            raise NoSignalError("reference images are entirely dark")
        self.npix = sum(p["ref"].size for p in self.parts)

    def predict(self, hapke: HapkeParams, gain: float):
        for p in self.parts:
            per_sample = np.zeros(p["lit"].shape)
            if p["mu0"].size and not hapke.black:
                per_sample[p["lit"]] = hapke_reflectance(hapke, p["mu0"], p["mu"], p["g"]) * p["alb"]
            yield p, gain * self.irradiance * per_sample.mean(axis=-1)[p["use"]]

    def loss(self, values: dict) -> float:
        hp = self.problem.scene.hapke.replace(**{k: values[k] for k in ("w", "b", "B0", "h")})
        sq = 0.0
        for p, pred in self.predict(hp, values["gain"]):
            sq += float(np.sum((pred - p["ref"]) ** 2))
        return sq / self.npix


def _initial_values(problem: CaptureProblem) -> dict:
    hp = problem.scene.hapke
    return {"w": hp.w, "b": hp.b, "B0": hp.B0, "h": hp.h, "gain": problem.render.gain}


def loss_at(problem: CaptureProblem, evaluator: _Evaluator | None = None, **values) -> float:
    """Loss with selected parameters overridden, e.g. ``loss_at(p, w=0.2, b=-0.3)``."""
    ev = evaluator or _Evaluator(problem)
    v = _initial_values(problem)
    v.update(values)
    return ev.loss(v)


def loss_grid(problem: CaptureProblem, axes: dict[str, Sequence[float]]) -> np.ndarray:
    """Brute-force loss over the Cartesian product of ``axes`` (ordered as given)."""
    ev = _Evaluator(problem)
    names = list(axes)
    grids = np.meshgrid(*[np.asarray(axes[n], dtype=float) for n in names], indexing="ij")
    out = np.empty(grids[0].shape)
    for idx in np.ndindex(out.shape):
        out[idx] = loss_at(problem, ev, **{n: float(g[idx]) for n, g in zip(names, grids)})
    return out


def fd_gradient(problem: CaptureProblem, values: dict | None = None,
                evaluator: _Evaluator | None = None) -> np.ndarray:
    """Central-difference gradient of the loss in transformed coordinates."""
    ev = evaluator or _Evaluator(problem)
    base = dict(values or _initial_values(problem))
    names = problem.free_parameters
    z = np.array([_to_z(n, base[n]) for n in names])
    return _grad(ev, names, z, base)


def _loss_z(ev, names, z, base):
    v = dict(base)
    for n, zi in zip(names, z):
        v[n] = _from_z(n, zi)
    return ev.loss(v)


def _grad(ev, names, z, base):
    g = np.empty(len(z))
    for i in range(len(z)):
        e = np.zeros(len(z))
        e[i] = _FD_STEP
        g[i] = (_loss_z(ev, names, z + e, base) - _loss_z(ev, names, z - e, base)) / (2 * _FD_STEP)
    return g


def fit_brdf(problem: CaptureProblem, max_iters: int = 500,
             step_tolerance: float = 1e-6) -> FitResult:
    """Gradient descent with Barzilai-Borwein step proposals and Armijo
    backtracking, in a logit/atanh/log parameterisation that keeps every
    iterate inside the Hapke domain. The loss trace never increases."""
    ev = _Evaluator(problem)
    names = problem.free_parameters
    base = _initial_values(problem)
    z = np.array([_to_z(n, base[n]) for n in names])
    loss = _loss_z(ev, names, z, base)
    trace = [loss]
    history = [{n: base[n] for n in names}]
    warning = None
    converged = False
    it = 0
    if not np.isfinite(loss):
        raise CaptureError("loss is not finite at the initial parameters")
    g = _grad(ev, names, z, base) if max_iters > 0 else None
    alpha = None
    for it in range(1, max_iters + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0:
            converged = True
            break
        if alpha is None:
            alpha = 0.1 / gnorm
        a = alpha
        accepted = False
        while a * gnorm >= step_tolerance * 1e-3:
            z_new = z - a * g
            l_new = _loss_z(ev, names, z_new, base)
            if np.isfinite(l_new) and l_new <= loss - 1e-4 * a * gnorm ** 2:
                accepted = True
                break
            if not np.isfinite(l_new):
                warning = "non-finite loss encountered; step rejected"
            a *= 0.5
        if not accepted:
            converged = a * gnorm < step_tolerance
            break
        s = z_new - z
        g_new = _grad(ev, names, z_new, base)
        yv = g_new - g
        sy = float(s @ yv)
        alpha = float(s @ s) / sy if sy > 0 else 2 * a
        z, g, loss = z_new, g_new, l_new
        trace.append(loss)
        history.append({n: _from_z(n, zi) for n, zi in zip(names, z)})
        if np.linalg.norm(s) < step_tolerance:
            converged = True
            break
    else:
        if max_iters > 0:
            warning = warning or "max_iters reached before the step tolerance"
    values = dict(base)
    for n, zi in zip(names, z):
        values[n] = _from_z(n, zi)
    hp = problem.scene.hapke.replace(**{k: values[k] for k in ("w", "b", "B0", "h")})
    if warning:
        log.warning("fit_brdf: %s", warning)
    return FitResult(hp, values["gain"], trace, it if max_iters > 0 else 0, converged,
                     warning, history)
