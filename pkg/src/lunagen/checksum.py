"""64-bit FNV-1a file checksums (corruption detection, not security)."""

from __future__ import annotations

from pathlib import Path

import numba
import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@numba.njit(cache=True)
def _fnv1a(data, h):
    prime = numba.uint64(FNV_PRIME)
    for i in range(data.shape[0]):
        h = (h ^ numba.uint64(data[i])) * prime
    return h


def fnv1a64(data: bytes) -> int:
    arr = np.frombuffer(data, dtype=np.uint8)
    return int(_fnv1a(arr, np.uint64(FNV_OFFSET)))


def file_checksum(path) -> str:
    return f"{fnv1a64(Path(path).read_bytes()):016x}"
