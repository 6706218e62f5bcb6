"""Counter-based standard normal draws.

Every draw is a pure function of ``(seed, index, step, component)``: the
counter is hashed with the SplitMix64 finaliser and mapped through the
inverse normal CDF.  Batches of scenarios can therefore be generated in any
order or split across workers and still agree bit for bit.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key(seed: int, index) -> np.ndarray:
    s = np.uint64(int(seed) & _MASK)
    idx = np.asarray(index, dtype=np.uint64)
    return _mix(_mix(s + _GOLDEN) ^ (idx * _M2 + _GOLDEN))


def uniforms(seed: int, indices, n_steps: int, dim: int) -> np.ndarray:
    """Open-interval uniforms of shape ``(len(indices), n_steps, dim)``."""
    with np.errstate(over="ignore"):
        keys = _key(seed, np.atleast_1d(indices))[:, None]
        ctr = np.arange(n_steps * dim, dtype=np.uint64)[None, :]
        bits = _mix(keys + (ctr + np.uint64(1)) * _GOLDEN)
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return u.reshape(-1, n_steps, dim)


def normals(seed: int, indices, n_steps: int, dim: int) -> np.ndarray:
    """Standard normals keyed by ``(seed, index, step, component)``."""
    return ndtri(uniforms(seed, indices, n_steps, dim))
