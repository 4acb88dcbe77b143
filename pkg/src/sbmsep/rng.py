"""Counter-based random numbers keyed by (seed, stream, step, counter).

A draw depends only on its key, never on execution order, so replicas and
cells may be processed in any order or on any worker with identical output.
The mixer is the SplitMix64 finaliser; normals use the polar method.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

__all__ = [
    "STREAM_SHARED",
    "STREAM_AUX_X",
    "STREAM_AUX_Y",
    "STREAM_ACCEPT",
    "mix64",
    "step_key",
    "uniform_at",
    "normal_at",
    "normal_pair_at",
    "normals",
    "replica_seed",
    "uniforms",
]

STREAM_SHARED = 0
STREAM_AUX_X = 1
STREAM_AUX_Y = 2
STREAM_ACCEPT = 3

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_S4 = np.uint64(4)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * math.pi


@nb.njit(cache=True, error_model="numpy")
def mix64(x):
    z = x + _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True, error_model="numpy")
def step_key(seed, stream, step):
    h = mix64(np.uint64(seed))
    h = mix64(h ^ np.uint64(stream))
    return mix64(h ^ np.uint64(step))


@nb.njit(cache=True, error_model="numpy")
def uniform_at(key, counter):
    """Uniform on the open interval (0, 1)."""
    c = np.uint64(counter) + _ONE
    z = mix64(np.uint64(key) + c * _GOLDEN)
    return (float(z >> _S11) + 0.5) * _INV53


@nb.njit(cache=True, error_model="numpy")
def normal_pair_at(key, pair):
    """Two independent standard normals (polar method) for counters 2p, 2p+1.

    Pair p owns uniform sub-counters 16p .. 16p+15, i.e. up to seven
    (u, v) proposals; if all reject (probability ~2e-5) the last two
    uniforms fall back to Box-Muller.
    """
    base = np.uint64(pair) << _S4
    for t in range(7):
        u = 2.0 * uniform_at(key, base + np.uint64(2 * t)) - 1.0
        v = 2.0 * uniform_at(key, base + np.uint64(2 * t + 1)) - 1.0
        s = u * u + v * v
        if 0.0 < s < 1.0:
            f = math.sqrt(-2.0 * math.log(s) / s)
            return u * f, v * f
    r = math.sqrt(-2.0 * math.log(uniform_at(key, base + np.uint64(14))))
    a = _TWO_PI * uniform_at(key, base + np.uint64(15))
    return r * math.cos(a), r * math.sin(a)


@nb.njit(cache=True, error_model="numpy")
def normal_at(key, counter):
    """Standard normal at ``counter``: one half of pair ``counter >> 1``."""
    c = np.uint64(counter)
    z0, z1 = normal_pair_at(key, c >> _ONE)
    if c & _ONE:
        return z1
    return z0


@nb.njit(cache=True, error_model="numpy")
def _normals(key, start, n, out):
    for i in range(n):
        out[i] = normal_at(key, np.uint64(start) + np.uint64(i))


@nb.njit(cache=True, error_model="numpy")
def _uniforms(key, start, n, out):
    for i in range(n):
        out[i] = uniform_at(key, np.uint64(start) + np.uint64(i))


def normals(seed: int, stream: int, step: int, n: int, start: int = 0) -> np.ndarray:
    out = np.empty(n)
    _normals(np.uint64(step_key(np.uint64(seed), np.uint64(stream), np.uint64(step))), np.uint64(start), n, out)
    return out


def uniforms(seed: int, stream: int, step: int, n: int, start: int = 0) -> np.ndarray:
    out = np.empty(n)
    _uniforms(np.uint64(step_key(np.uint64(seed), np.uint64(stream), np.uint64(step))), np.uint64(start), n, out)
    return out


def replica_seed(master: int, replica: int) -> int:
    """Per-replica 64-bit seed derived from the master seed."""
    return int(mix64(mix64(np.uint64(master & 0xFFFFFFFFFFFFFFFF)) ^ np.uint64(replica)))
