"""Counter-based random streams.

Every random draw in the package is a pure function of ``(seed, counters...)``
so results never depend on evaluation order or worker count. The mixer is
SplitMix64's finaliser; numpy arrays of uint64 wrap on overflow, which is
exactly the arithmetic it needs.
"""

from __future__ import annotations

import hashlib

import numba
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z):
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def hash_u64(seed: int, *counters) -> np.ndarray | np.uint64:
    """Hash a seed and any number of integer counters (scalars or arrays)."""
    h = np.uint64(int(seed) & _MASK64)
    with np.errstate(over="ignore"):
        h = _mix(h + _GOLDEN)
        for c in counters:
            c = np.asarray(c).astype(np.uint64)
            h = _mix(h ^ (c + _GOLDEN))
    return h


def uniform(seed: int, *counters) -> np.ndarray:
    """Uniform floats in [0, 1) with 53 bits of resolution."""
    h = hash_u64(seed, *counters)
    return (np.asarray(h) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def sub_seed(seed: int, name: str) -> int:
    """Named child seed, e.g. ``sub_seed(top, "render")``."""
    tag = int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")
    return int(hash_u64(seed, tag))


@numba.njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> numba.uint64(30))) * numba.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> numba.uint64(27))) * numba.uint64(0x94D049BB133111EB)
    return z ^ (z >> numba.uint64(31))


@numba.njit(cache=True, inline="always")
def jit_hash_prefix(seed, a, b, c):
    """Hash state after ``seed, a, b, c``; finish with :func:`jit_hash_extend`."""
    g = numba.uint64(0x9E3779B97F4A7C15)
    h = mix64(numba.uint64(seed) + g)
    h = mix64(h ^ (numba.uint64(a) + g))
    h = mix64(h ^ (numba.uint64(b) + g))
    return mix64(h ^ (numba.uint64(c) + g))


@numba.njit(cache=True, inline="always")
def jit_hash_extend(h, d):
    return mix64(h ^ (numba.uint64(d) + numba.uint64(0x9E3779B97F4A7C15)))


@numba.njit(cache=True)
def jit_hash4(seed, a, b, c, d):
    return jit_hash_extend(jit_hash_prefix(seed, a, b, c), d)


@numba.njit(cache=True)
def jit_unit(h):
    return numba.float64(h >> numba.uint64(11)) * (1.0 / 9007199254740992.0)
