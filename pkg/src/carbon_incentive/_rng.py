"""Counter-based random streams.

Every draw is a pure function of ``(seed, label, *counters)``, so generation
can be chunked or parallelised over individuals without changing any value.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy import special

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser; uint64 arithmetic wraps silently for arrays
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_key(seed: int, label: str) -> int:
    """64-bit key for a named sub-stream of ``seed``."""
    digest = hashlib.blake2b(f"{int(seed)}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def bits(key: int, *counters) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = _mix(np.asarray(np.uint64(key)))
        for c in counters:
            c = np.asarray(c).astype(np.uint64)
            h = _mix(h ^ _mix(c))
    return h


def uniform(key: int, *counters) -> np.ndarray:
    """Uniform variates on the open interval (0, 1)."""
    h = bits(key, *counters)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normal(key: int, *counters) -> np.ndarray:
    return special.ndtri(uniform(key, *counters))


def categorical(u: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw; ``probs`` is (n, k) row-stochastic or a single (k,) row."""
    cdf = np.cumsum(probs, axis=-1)
    cdf = cdf / cdf[..., -1:]
    if cdf.ndim == 1:
        return np.searchsorted(cdf, u, side="right").clip(max=len(cdf) - 1)
    return (u[:, None] >= cdf).sum(axis=1).clip(max=cdf.shape[1] - 1)


class Streams:
    """Named sub-streams derived from one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def key(self, label: str) -> int:
        return stream_key(self.seed, label)

    def uniform(self, label: str, *counters) -> np.ndarray:
        return uniform(self.key(label), *counters)

    def normal(self, label: str, *counters) -> np.ndarray:
        return normal(self.key(label), *counters)

    def numpy(self, label: str) -> np.random.Generator:
        """Classic generator for stages that draw sequentially (bootstrap, init)."""
        return np.random.default_rng(self.key(label))
