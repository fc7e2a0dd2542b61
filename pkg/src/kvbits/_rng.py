"""Version-stable random streams.

Everything stochastic in the package draws from here.  The generator is
PCG64 (the 128-bit LCG with XSL-RR output permutation) driven only through
its raw 64-bit output, which numpy guarantees to be stable across releases.
Doubles use the top 53 bits of each word; Gaussians come from the
Box-Muller transform, with both outputs of a pair kept (cos first, then sin).
We deliberately avoid ``Generator.standard_normal`` whose algorithm numpy
reserves the right to change.
"""

from __future__ import annotations

import numpy as np

_TWO_POW_M53 = 2.0**-53


def _bitgen(seed: int) -> np.random.PCG64:
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    return np.random.PCG64(seed)


def raw_words(seed: int, n: int) -> np.ndarray:
    """First ``n`` raw 64-bit words of the PCG64 stream for ``seed``."""
    return np.asarray(_bitgen(seed).random_raw(n), dtype=np.uint64)


def uniform(seed: int, n: int) -> np.ndarray:
    """``n`` doubles in [0, 1)."""
    return (raw_words(seed, n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53


def standard_normal(seed: int, n: int) -> np.ndarray:
    """``n`` standard normal draws via Box-Muller."""
    pairs = (n + 1) // 2
    u = uniform(seed, 2 * pairs)
    # 1 - u lies in (0, 1], so the log is finite
    radius = np.sqrt(-2.0 * np.log1p(-u[0::2]))
    angle = 2.0 * np.pi * u[1::2]
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out[:n]


def random_signs(seed: int, n: int) -> np.ndarray:
    """``n`` values in {-1.0, +1.0} from the top bit of each word."""
    top = (raw_words(seed, n) >> np.uint64(63)).astype(np.float64)
    return 1.0 - 2.0 * top
