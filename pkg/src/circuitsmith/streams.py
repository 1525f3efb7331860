"""Counter-based randomness: every (point, replicate) pair owns a uniform
stream addressed by (seed, index, replicate), so draws are identical no matter
what order — or on how many workers — points are processed.
"""
from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox

_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *path: int) -> int:
    """Stable 64-bit child seed for a role path like (rep, fold, role)."""
    h = _splitmix64(seed & _MASK64)
    for v in path:
        h = _splitmix64(h ^ (v & _MASK64))
    return h


def point_uniforms(seed: int, index: int, replicate: int, k: int) -> np.ndarray:
    """k uniforms in [0, 1) for grid point `index`, perturbation replicate `replicate`."""
    if index < 0 or replicate < 0:
        raise ValueError("index and replicate must be non-negative")
    gen = Generator(Philox(key=seed & _MASK64, counter=[0, index, replicate, 0]))
    return gen.random(k)


def batch_uniforms(seed: int, n_points: int, replicate: int, k: int) -> np.ndarray:
    """(n_points, k) matrix of per-point uniforms, rows independent streams."""
    out = np.empty((n_points, k), dtype=np.float64)
    for i in range(n_points):
        out[i] = point_uniforms(seed, i, replicate, k)
    return out
