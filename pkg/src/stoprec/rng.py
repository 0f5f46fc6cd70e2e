"""Stateless counter-based uniforms.

Every random number used by the walk kernel is a pure function of
``(seed, row, chain, step)``, so results do not depend on how rows are
scheduled across threads.  The mixer is the SplitMix64 finaliser applied
once per key component.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


@njit(cache=True, inline="always")
def mix64(x):
    z = x + _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def counter_uniform(seed, row, chain, step):
    """Uniform double in [0, 1) keyed by four non-negative integers."""
    h = mix64(np.uint64(seed))
    h = mix64(h ^ np.uint64(row))
    h = mix64(h ^ np.uint64(chain))
    h = mix64(h ^ np.uint64(step))
    return float(h >> _S11) * _INV53


@njit(cache=True)
def counter_uniforms(seed, rows, chains, steps):
    out = np.empty(len(rows))
    for k in range(len(rows)):
        out[k] = counter_uniform(seed, rows[k], chains[k], steps[k])
    return out
