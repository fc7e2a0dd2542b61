"""Round-to-nearest quantizer simulators on synthetic per-head tensors.

A block is a ``(tokens, head_dim)`` float array holding one head's cached
keys or values.  Schemes:

``per_token_symmetric``
    one scale per row, ``scale = max|x| / (2**(b-1) - 1)``, levels
    ``{-q..q} * scale``; needs ``b >= 2``.
``per_token_asymmetric``
    one (min, scale) per row, ``scale = (max - min) / (2**b - 1)``.
``per_channel_symmetric``
    symmetric, one scale per column spanning every token (no sub-groups,
    no residual full-precision window).
``hadamard_per_token_symmetric``
    multiply columns by a seeded random sign vector, apply the orthonormal
    Walsh-Hadamard transform to each row, quantize per-token symmetric,
    then undo both.  ``head_dim`` must be a power of two.
``lloyd_max_gaussian``
    the unit-Gaussian Lloyd-Max codebook applied elementwise; assumes the
    data is already standardized.

Rounding is half away from zero.  A group whose range is zero is returned
unchanged.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from kvbits import _rng
from kvbits.distortion import MsePoint, lloyd_max_codebook

SCHEMES = (
    "per_token_symmetric",
    "per_token_asymmetric",
    "per_channel_symmetric",
    "hadamard_per_token_symmetric",
    "lloyd_max_gaussian",
)

_ALIASES = {
    "lloyd_max": "lloyd_max_gaussian",
    "hadamard": "hadamard_per_token_symmetric",
    "rtn": "per_token_symmetric",
}

DISTRIBUTIONS = ("gaussian", "heavy_tailed")
OUTLIER_FRACTION = 0.01
OUTLIER_SCALE = 20.0


class QuantizerError(ValueError):
    pass


def resolve_scheme(name: str) -> str:
    """Canonical scheme name; accepts hyphens and a few short aliases."""
    key = name.strip().lower().replace("-", "_")
    key = _ALIASES.get(key, key)
    if key not in SCHEMES:
        raise QuantizerError(f"unknown quantizer {name!r}; valid schemes: {', '.join(SCHEMES)}")
    return key


@dataclass(frozen=True)
class QuantizerSpec:
    scheme: str
    seed: int = 0
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "scheme", resolve_scheme(self.scheme))
        if not self.label:
            object.__setattr__(self, "label", self.scheme)


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _fwht(x: np.ndarray) -> np.ndarray:
    """Orthonormal Walsh-Hadamard transform along the last axis."""
    n = x.shape[-1]
    if not _is_pow2(n):
        raise QuantizerError(f"Hadamard transform needs a power-of-two length, got {n}")
    lead = x.shape[:-1]
    y = np.array(x, dtype=np.float64, copy=True).reshape(-1, n)
    h = 1
    while h < n:
        y = y.reshape(y.shape[0], n // (2 * h), 2, h)
        a = y[:, :, 0, :]
        b = y[:, :, 1, :]
        y = np.stack((a + b, a - b), axis=2)
        h *= 2
    return (y.reshape(*lead, n) / np.sqrt(n)).reshape(x.shape)


def hadamard_transform(vector) -> np.ndarray:
    """Normalized Walsh-Hadamard transform of a power-of-two length vector.

    The matrix is symmetric and orthonormal, so applying it twice returns
    the input.
    """
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1:
        raise QuantizerError(f"expected a 1-D vector, got shape {v.shape}")
    return _fwht(v)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _symmetric(x: np.ndarray, bits: int, axis: int) -> np.ndarray:
    if bits < 2:
        raise QuantizerError("symmetric schemes need bits >= 2 (b=1 leaves no nonzero level)")
    qmax = 2 ** (bits - 1) - 1
    absmax = np.max(np.abs(x), axis=axis, keepdims=True)
    scale = absmax / qmax
    safe = np.where(scale > 0, scale, 1.0)
    q = np.clip(_round_half_away(x / safe), -qmax, qmax)
    return np.where(scale > 0, q * safe, x)


def _asymmetric(x: np.ndarray, bits: int, axis: int) -> np.ndarray:
    qmax = 2**bits - 1
    lo = np.min(x, axis=axis, keepdims=True)
    hi = np.max(x, axis=axis, keepdims=True)
    scale = (hi - lo) / qmax
    safe = np.where(scale > 0, scale, 1.0)
    # x - lo >= 0, so half-away-from-zero is floor(. + 0.5)
    q = np.clip(np.floor((x - lo) / safe + 0.5), 0, qmax)
    return np.where(scale > 0, lo + q * safe, x)


def _check_block(block) -> np.ndarray:
    x = np.asarray(block, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise QuantizerError(f"block must be a nonempty (tokens, head_dim) array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise QuantizerError("block contains non-finite values")
    return x


def quantize_dequantize(block, spec: QuantizerSpec, bits: int) -> np.ndarray:
    """Reconstruction of ``block`` after ``bits``-bit quantization under ``spec``."""
    if isinstance(bits, bool) or int(bits) != bits or not 1 <= bits <= 8:
        raise QuantizerError(f"bits must be an integer in 1..8, got {bits!r}")
    bits = int(bits)
    x = _check_block(block)
    scheme = spec.scheme
    if scheme == "per_token_symmetric":
        return _symmetric(x, bits, axis=1)
    if scheme == "per_token_asymmetric":
        return _asymmetric(x, bits, axis=1)
    if scheme == "per_channel_symmetric":
        return _symmetric(x, bits, axis=0)
    if scheme == "hadamard_per_token_symmetric":
        d = x.shape[1]
        if not _is_pow2(d):
            raise QuantizerError(f"hadamard scheme needs a power-of-two head_dim, got {d}")
        signs = _rng.random_signs(spec.seed, d)
        rotated = _fwht(x * signs)
        return _fwht(_symmetric(rotated, bits, axis=1)) * signs
    if scheme == "lloyd_max_gaussian":
        # the codebook has no zero level at any bit-width, so a constant block
        # (one group with zero range) is passed through like the grid schemes
        if x.size and np.ptp(x) == 0:
            return x.copy()
        return lloyd_max_codebook(bits).quantize(x)
    raise QuantizerError(f"unhandled scheme {scheme!r}")  # pragma: no cover


def mse(block, reconstruction) -> float:
    """Per-element mean squared error."""
    diff = np.asarray(block, dtype=np.float64) - reconstruction
    return float(np.mean(diff * diff))


def synthetic_block(rows: int, cols: int, seed: int, dist: str = "gaussian") -> np.ndarray:
    """Seeded ``rows x cols`` calibration block.

    ``heavy_tailed`` is unit Gaussian with about 1% of entries (chosen by a
    second stream, seed + 1) multiplied by 20.
    """
    if rows < 1 or cols < 1:
        raise QuantizerError(f"rows and cols must be positive, got {rows}x{cols}")
    if dist not in DISTRIBUTIONS:
        raise QuantizerError(f"unknown distribution {dist!r}; expected one of {DISTRIBUTIONS}")
    x = _rng.standard_normal(seed, rows * cols)
    if dist == "heavy_tailed":
        outlier = _rng.uniform(seed + 1, rows * cols) < OUTLIER_FRACTION
        x[outlier] *= OUTLIER_SCALE
    return x.reshape(rows, cols)


def measure_mse(
    spec: QuantizerSpec,
    bits_list=(2, 3, 4, 5, 6),
    dist: str = "gaussian",
    rows: int = 4096,
    cols: int = 128,
    seed: int = 42,
) -> list:
    """Empirical MSE of ``spec`` at each bit-width, all on the same seeded block."""
    block = synthetic_block(rows, cols, seed, dist)
    return [MsePoint(float(b), mse(block, quantize_dequantize(block, spec, b))) for b in bits_list]


def calibrate_schemes(
    specs,
    bits_list=(2, 3, 4, 5, 6),
    dist: str = "gaussian",
    rows: int = 4096,
    cols: int = 128,
    seed: int = 42,
    max_workers: int | None = None,
) -> dict:
    """``measure_mse`` for several specs; task ``i`` uses data seed ``seed + i``.

    Seeds depend only on list position, so results do not depend on how the
    thread pool schedules the tasks.
    """
    specs = list(specs)

    def task(i):
        return measure_mse(specs[i], bits_list, dist, rows, cols, seed + i)

    if max_workers == 1 or len(specs) <= 1:
        results = [task(i) for i in range(len(specs))]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(task, range(len(specs))))
    return {spec.label: pts for spec, pts in zip(specs, results)}
