"""Counter-based SplitMix64 streams.

Every random draw in the package is a pure function of a 64-bit key and a
small tuple of counters (particle id, step index, draw index), so results do
not depend on the order in which particles, paths or cells are visited.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0

# stream purposes mixed into every derived seed
PURPOSE_ENV = 0x01
PURPOSE_MOTION = 0x02
PURPOSE_BRANCH = 0x03
PURPOSE_KILL = 0x04
PURPOSE_PATHS = 0x05
PURPOSE_SUBSAMPLE = 0x06

MASK64 = (1 << 64) - 1


@njit(cache=True, inline="always")
def mix64(z):
    """SplitMix64 finalizer applied after the golden-ratio increment."""
    z = z + GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def chain(h, v):
    return mix64(h ^ v)


@njit(cache=True, inline="always")
def to_unit(z):
    """Top 53 bits as a double in [0, 1)."""
    return float(z >> _S11) * _INV53


@njit(cache=True, inline="always")
def draw_key(seed, ident, step):
    return chain(chain(seed, ident), np.uint64(step))


@njit(cache=True, inline="always")
def uniform_at(key, j):
    return to_unit(chain(key, np.uint64(j)))


@njit(cache=True, inline="always")
def normal_pair(key, j):
    """Marsaglia polar pair from draws ``j, j+1, ...`` of ``key``; returns (z0, z1, next j)."""
    while True:
        u = 2.0 * uniform_at(key, j) - 1.0
        v = 2.0 * uniform_at(key, j + 1) - 1.0
        j += 2
        s = u * u + v * v
        if 0.0 < s < 1.0:
            f = math.sqrt(-2.0 * math.log(s) / s)
            return u * f, v * f, j


def as_u64(value: int) -> np.uint64:
    """Two's-complement encoding of a Python int as uint64."""
    return np.uint64(int(value) & MASK64)


def derive(seed: int, *counters: int) -> int:
    """Chain ``counters`` into ``seed``; returns a plain int in [0, 2**64)."""
    h = as_u64(mix64(as_u64(seed)))
    for c in counters:
        h = as_u64(chain(h, as_u64(c)))
    return int(h)
