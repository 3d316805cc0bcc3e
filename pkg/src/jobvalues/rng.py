"""Counter-based random numbers: every draw is a pure function of
``(seed, stream, counter, slot)``, so results do not depend on evaluation
order or on how work is split across processes."""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_K_STREAM = np.uint64(0x9E3779B97F4A7C15)
_K_COUNTER = np.uint64(0xD1B54A32D192ED03)
_K_SLOT = np.uint64(0x8CB92BA72F3D8DD7)
_MASK = (1 << 64) - 1


def _mix(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def random_bits(seed: int, stream, counter, slot) -> np.ndarray:
    """64-bit hashes of the given counters (broadcast together)."""
    s = _mix(np.asarray([int(seed) & _MASK], dtype=np.uint64))[0]
    stream = np.asarray(stream).astype(np.int64).astype(np.uint64)
    counter = (np.asarray(counter).astype(np.int64) + 1).astype(np.uint64)
    slot = np.asarray(slot).astype(np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        x = s + stream * _K_STREAM + counter * _K_COUNTER + slot * _K_SLOT
        return _mix(_mix(x) + s)


def uniform(seed, stream, counter, slot) -> np.ndarray:
    """Uniforms on the open interval (0, 1)."""
    bits = random_bits(seed, stream, counter, slot) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * 2.0 ** -53


def gumbel(seed, stream, counter, slot) -> np.ndarray:
    return -np.log(-np.log(uniform(seed, stream, counter, slot)))


def normal(seed, stream, counter, slot) -> np.ndarray:
    return ndtri(uniform(seed, stream, counter, slot))


def integers(seed, stream, counter, slot, low: int, high: int) -> np.ndarray:
    """Integers uniform on ``[low, high]`` inclusive."""
    u = uniform(seed, stream, counter, slot)
    return low + np.minimum(np.floor(u * (high - low + 1)).astype(np.int64), high - low)


def categorical(u: np.ndarray, probs) -> np.ndarray:
    """Inverse-CDF draw from ``probs`` using uniforms ``u``."""
    cdf = np.cumsum(np.asarray(probs, dtype=float))
    cdf /= cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
