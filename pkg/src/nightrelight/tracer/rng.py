"""Stateless counter-based random numbers for the renderer.

A uniform variate is a pure function of (seed, pixel, sample, dimension),
so images do not depend on how pixels are scheduled across threads.
"""

import numba
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@numba.njit(inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@numba.njit(inline="always")
def sample_key(seed, pixel, sample):
    return mix64(mix64(mix64(np.uint64(seed) + _GOLDEN) ^ np.uint64(pixel)) + np.uint64(sample) * _GOLDEN)


@numba.njit(inline="always")
def uniform(key, dim):
    """Uniform double in [0, 1) for one dimension of a keyed sample."""
    h = mix64(key ^ (np.uint64(dim + 1) * _GOLDEN))
    return float(h >> _S11) * _INV53


@numba.njit(cache=True)
def uniforms(seed, pixel, sample, n):
    key = sample_key(seed, pixel, sample)
    out = np.empty(n)
    for i in range(n):
        out[i] = uniform(key, i)
    return out
