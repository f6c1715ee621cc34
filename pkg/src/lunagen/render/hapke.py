"""Hapke bidirectional reflectance for particulate surfaces.

Isotropic multiple scattering with the rational H-function approximation,
a single-lobe Henyey-Greenstein particle phase function and the shadow-hiding
opposition surge. No macroscopic roughness or porosity correction.

    r = w/(4 pi) * mu0/(mu0 + mu) * [(1 + B(g)) P(g) + H(mu0) H(mu) - 1]

``r`` (:func:`hapke_reflectance`) is the reflectance in the radiance-factor
sense: radiance = irradiance * r for collimated light of irradiance measured
normal to the beam. The BRDF proper (:func:`hapke_brdf`) is ``r / mu0``,
which is symmetric in ``mu0`` and ``mu``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numba
import numpy as np


class HapkeDomainError(ValueError):
    pass


@dataclass(frozen=True)
class HapkeParams:
    w: float = 0.11
    b: float = -0.4
    B0: float = 1.0
    h: float = 0.06
    black: bool = False  # zero-albedo surface; w itself must stay in (0, 1]

    def __post_init__(self):
        if not 0 < self.w <= 1:
            raise HapkeDomainError(f"w must lie in (0, 1], got {self.w}")
        if not -1 < self.b < 1:
            raise HapkeDomainError(f"b must lie in (-1, 1), got {self.b}")
        if not self.B0 >= 0:
            raise HapkeDomainError(f"B0 must be >= 0, got {self.B0}")
        if not self.h > 0:
            raise HapkeDomainError(f"h must be > 0, got {self.h}")

    def replace(self, **kw) -> "HapkeParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {"w": self.w, "b": self.b, "B0": self.B0, "h": self.h, "black": self.black}

    @classmethod
    def from_dict(cls, d) -> "HapkeParams":
        d = {**cls().to_dict(), **d}  # missing keys take the defaults
        return cls(float(d["w"]), float(d["b"]), float(d["B0"]), float(d["h"]), bool(d["black"]))


def h_function(x, w):
    return (1 + 2 * x) / (1 + 2 * x * np.sqrt(1 - w))


def hg_phase(g, b):
    return (1 - b * b) / (1 + 2 * b * np.cos(g) + b * b) ** 1.5


def opposition_surge(g, B0, h):
    return B0 / (1 + np.tan(g / 2) / h)


def hapke_reflectance(p: HapkeParams, mu0, mu, g):
    """Bidirectional reflectance ``r`` in 1/sr; accepts scalars or arrays."""
    mu0 = np.asarray(mu0, dtype=float)
    mu = np.asarray(mu, dtype=float)
    g = np.asarray(g, dtype=float)
    if np.any(~((mu0 > 0) & (mu0 <= 1))) or np.any(~((mu > 0) & (mu <= 1))):
        raise HapkeDomainError("mu0 and mu must lie in (0, 1]")
    if np.any(~((g >= 0) & (g <= np.pi))):
        raise HapkeDomainError("phase angle must lie in [0, pi]")
    if p.black:
        r = np.zeros(np.broadcast(mu0, mu, g).shape)
    else:
        bracket = ((1 + opposition_surge(g, p.B0, p.h)) * hg_phase(g, p.b)
                   + h_function(mu0, p.w) * h_function(mu, p.w) - 1)
        r = p.w / (4 * np.pi) * mu0 / (mu0 + mu) * bracket
    return float(r) if r.ndim == 0 else r


@numba.njit(cache=True, error_model="numpy")
def hapke_jit(w, b, B0, h, mu0, mu, g):
    """Compiled :func:`hapke_reflectance` for scalars (no domain checks)."""
    sq = math.sqrt(1.0 - w)
    h0 = (1.0 + 2.0 * mu0) / (1.0 + 2.0 * mu0 * sq)
    h1 = (1.0 + 2.0 * mu) / (1.0 + 2.0 * mu * sq)
    phase = (1.0 - b * b) / (1.0 + 2.0 * b * math.cos(g) + b * b) ** 1.5
    surge = B0 / (1.0 + math.tan(0.5 * g) / h)
    return w / (4.0 * math.pi) * mu0 / (mu0 + mu) * ((1.0 + surge) * phase + h0 * h1 - 1.0)


@numba.njit(cache=True, error_model="numpy")
def hapke_jit_cos(w, b, B0, h, mu0, mu, cosg):
    """:func:`hapke_jit` taking the cosine of the phase angle (saves three
    transcendental calls per sample in the renderer)."""
    sq = math.sqrt(1.0 - w)
    h0 = (1.0 + 2.0 * mu0) / (1.0 + 2.0 * mu0 * sq)
    h1 = (1.0 + 2.0 * mu) / (1.0 + 2.0 * mu * sq)
    q = 1.0 + 2.0 * b * cosg + b * b
    phase = (1.0 - b * b) / (q * math.sqrt(q))
    surge = 0.0
    if cosg > -1.0:
        surge = B0 / (1.0 + math.sqrt((1.0 - cosg) / (1.0 + cosg)) / h)  # tan(g/2)
    return w / (4.0 * math.pi) * mu0 / (mu0 + mu) * ((1.0 + surge) * phase + h0 * h1 - 1.0)


def hapke_brdf(p: HapkeParams, mu0, mu, g):
    """BRDF in 1/sr, ``r / mu0``: reciprocal under ``mu0 <-> mu``."""
    r = hapke_reflectance(p, mu0, mu, g)
    return r / np.asarray(mu0, dtype=float) if np.ndim(r) else r / float(mu0)
