"""Per-head sensitivity maps and the statistics that drive allocation.

A sensitivity map holds one positive importance weight per (layer, KV head)
for keys and another for values.  How those weights are estimated is not
this package's concern; maps are read from JSON or synthesized.

File format (UTF-8 JSON)::

    {
      "model": "qwen3-8b",
      "num_layers": 36,
      "num_kv_heads": 8,
      "weights_k": [[...H numbers...], ... L rows ...],
      "weights_v": [[...]],
      "source_label": "gradient"
    }
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kvbits import _rng


class SensitivityError(ValueError):
    """Malformed or invalid sensitivity data."""


def _check_grid(name: str, grid, num_layers: int, num_kv_heads: int) -> np.ndarray:
    try:
        arr = np.asarray(grid, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SensitivityError(f"{name}: not a numeric grid ({exc})") from None
    if arr.shape != (num_layers, num_kv_heads):
        raise SensitivityError(
            f"{name}: expected shape ({num_layers}, {num_kv_heads}) "
            f"from num_layers/num_kv_heads, got {arr.shape}"
        )
    bad = ~(np.isfinite(arr) & (arr > 0))
    if bad.any():
        layer, head = (int(i) for i in np.argwhere(bad)[0])
        raise SensitivityError(
            f"{name}: weight at (layer={layer}, head={head}) is {arr[layer, head]!r}; "
            "weights must be finite and strictly positive"
        )
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SensitivityMap:
    """Key and value importance weights on an L x H grid."""

    num_layers: int
    num_kv_heads: int
    weights_k: np.ndarray
    weights_v: np.ndarray
    source_label: str = ""
    model: str = ""

    def __post_init__(self):
        for dim in ("num_layers", "num_kv_heads"):
            value = getattr(self, dim)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise SensitivityError(f"{dim} must be a positive integer, got {value!r}")
        L, H = int(self.num_layers), int(self.num_kv_heads)
        object.__setattr__(self, "num_layers", L)
        object.__setattr__(self, "num_kv_heads", H)
        object.__setattr__(self, "weights_k", _check_grid("weights_k", self.weights_k, L, H))
        object.__setattr__(self, "weights_v", _check_grid("weights_v", self.weights_v, L, H))

    @property
    def num_heads(self) -> int:
        """N = L * H, components per side."""
        return self.num_layers * self.num_kv_heads

    def all_weights(self) -> np.ndarray:
        """Keys then values, each flattened in (layer, head) order; length 2N."""
        return np.concatenate([self.weights_k.ravel(), self.weights_v.ravel()])

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "num_layers": self.num_layers,
            "num_kv_heads": self.num_kv_heads,
            "weights_k": self.weights_k.tolist(),
            "weights_v": self.weights_v.tolist(),
            "source_label": self.source_label,
        }

    def __eq__(self, other):
        if not isinstance(other, SensitivityMap):
            return NotImplemented
        return (
            self.num_layers == other.num_layers
            and self.num_kv_heads == other.num_kv_heads
            and self.source_label == other.source_label
            and self.model == other.model
            and np.array_equal(self.weights_k, other.weights_k)
            and np.array_equal(self.weights_v, other.weights_v)
        )

    __hash__ = None


def sensitivity_from_dict(data: dict) -> SensitivityMap:
    if not isinstance(data, dict):
        raise SensitivityError("top-level JSON value must be an object")
    missing = [k for k in ("num_layers", "num_kv_heads", "weights_k", "weights_v") if k not in data]
    if missing:
        raise SensitivityError(f"missing field(s): {', '.join(missing)}")
    return SensitivityMap(
        num_layers=data["num_layers"],
        num_kv_heads=data["num_kv_heads"],
        weights_k=data["weights_k"],
        weights_v=data["weights_v"],
        source_label=str(data.get("source_label", "")),
        model=str(data.get("model", "")),
    )


def load_sensitivity(path) -> SensitivityMap:
    """Read and validate a sensitivity JSON file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SensitivityError(f"{path}: invalid JSON ({exc})") from None
    return sensitivity_from_dict(data)


def save_sensitivity(sens: SensitivityMap, path) -> None:
    Path(path).write_text(json.dumps(sens.to_dict(), indent=2) + "\n", encoding="utf-8")


def synth_lognormal(
    num_layers: int,
    num_kv_heads: int,
    mu: float = 0.0,
    sigma: float = 1.0,
    seed: int = 42,
) -> SensitivityMap:
    """Synthetic map with ln w ~ Normal(mu, sigma^2), i.i.d. per entry.

    Key weights use the first L*H draws of the seeded stream and value
    weights the next L*H, so the result is a pure function of the arguments.
    """
    if num_layers < 1 or num_kv_heads < 1:
        raise SensitivityError(
            f"dimensions must be positive, got num_layers={num_layers}, num_kv_heads={num_kv_heads}"
        )
    if not sigma >= 0:
        raise SensitivityError(f"sigma must be nonnegative, got {sigma}")
    n = num_layers * num_kv_heads
    z = _rng.standard_normal(seed, 2 * n)
    logw = mu + sigma * z
    return SensitivityMap(
        num_layers=num_layers,
        num_kv_heads=num_kv_heads,
        weights_k=np.exp(logw[:n]).reshape(num_layers, num_kv_heads),
        weights_v=np.exp(logw[n:]).reshape(num_layers, num_kv_heads),
        source_label="synthetic",
        model=f"lognormal(mu={mu}, sigma={sigma}, seed={seed})",
    )


@dataclass(frozen=True)
class SensitivityStats:
    arithmetic_mean: float
    geometric_mean: float
    log_std: float
    count: int
    am_gm_ratio: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "am_gm_ratio", self.arithmetic_mean / self.geometric_mean)

    @property
    def lognormal_gain(self) -> float:
        """exp(sigma^2 / 2): the gain a log-normal population with this spread implies."""
        return math.exp(self.log_std**2 / 2.0)


def stats(weights) -> SensitivityStats:
    """Arithmetic mean, geometric mean and population std of ln w.

    The geometric mean is exp(mean(ln w)), which stays finite for the
    several hundred components of a full model.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise SensitivityError("stats() needs at least one weight")
    bad = ~(np.isfinite(w) & (w > 0))
    if bad.any():
        i = int(np.argmax(bad))
        raise SensitivityError(f"weight at index {i} is {w[i]!r}; weights must be finite and positive")
    if np.all(w == w[0]):
        # exact: no rounding in the means, ratio exactly 1
        return SensitivityStats(float(w[0]), float(w[0]), 0.0, int(w.size))
    logw = np.log(w)
    am = float(np.mean(w))
    gm = float(np.exp(np.mean(logw)))
    log_std = float(np.std(logw))
    # rounding can leave gm a hair above am for nearly equal entries
    gm = min(gm, am)
    return SensitivityStats(arithmetic_mean=am, geometric_mean=gm, log_std=log_std, count=int(w.size))
