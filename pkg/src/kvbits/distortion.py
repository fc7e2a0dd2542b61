"""Exponential distortion-rate models, the Lloyd-Max Gaussian oracle, and calibration.

The working model is ``D(b) = alpha * beta**(-b)``: per-element MSE that
shrinks by a constant factor ``beta > 1`` per extra bit.  Calibration fits
``(alpha, beta)`` by ordinary least squares of ``ln D`` on ``b``.

MSE is always per element (sum of squared errors / number of elements).

Files:

* model JSON: ``{quantizer, component, alpha, beta, r2, fit_bits}``
* MSE CSV, header ``quantizer,component,bits,mse``
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri

logger = logging.getLogger(__name__)

COMPONENTS = ("key", "value")


class CalibrationError(ValueError):
    """Distortion data that cannot be fitted by a decaying exponential."""


class LloydMaxConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class DistortionModel:
    """``D(b) = alpha * beta**(-b)`` with fit metadata."""

    alpha: float
    beta: float
    r_squared: float = 1.0
    fit_bits: tuple = ()
    quantizer: str = ""
    component: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")
        if not (math.isfinite(self.beta) and self.beta > 1):
            raise ValueError(f"beta must be > 1, got {self.beta}")
        object.__setattr__(self, "fit_bits", tuple(float(b) for b in self.fit_bits))

    @property
    def log_beta(self) -> float:
        return math.log(self.beta)

    def __call__(self, bits):
        return self.alpha * np.power(self.beta, -np.asarray(bits, dtype=np.float64))

    def slope(self, bits):
        """-dD/db = alpha * ln(beta) * beta**(-b)."""
        return self.log_beta * self(bits)

    def to_dict(self) -> dict:
        return {
            "quantizer": self.quantizer,
            "component": self.component,
            "alpha": self.alpha,
            "beta": self.beta,
            "r2": self.r_squared,
            "fit_bits": list(self.fit_bits),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DistortionModel":
        try:
            return cls(
                alpha=float(data["alpha"]),
                beta=float(data["beta"]),
                r_squared=float(data.get("r2", 1.0)),
                fit_bits=tuple(data.get("fit_bits", ())),
                quantizer=str(data.get("quantizer", "")),
                component=str(data.get("component", "")),
            )
        except KeyError as exc:
            raise ValueError(f"model file missing field {exc}") from None


def eval_distortion(model: DistortionModel, bits: float) -> float:
    if not math.isfinite(bits):
        raise ValueError(f"bits must be finite, got {bits}")
    return float(model.alpha * model.beta ** (-bits))


def save_model(model: DistortionModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_model(path) -> DistortionModel:
    return DistortionModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Lloyd-Max quantizer for N(0, 1)
# ---------------------------------------------------------------------------

MAX_LLOYD_ITER = 10_000
LLOYD_TOL = 1e-12


@dataclass(frozen=True)
class LloydMaxCodebook:
    bits: int
    levels: np.ndarray = field(repr=False)
    thresholds: np.ndarray = field(repr=False)
    mse: float
    iterations: int
    converged: bool

    def quantize(self, x: np.ndarray) -> np.ndarray:
        return self.levels[np.searchsorted(self.thresholds, x)]


def _normal_pdf(x):
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _cell_moments(edges):
    """Probability, first and second raw moments of N(0,1) on each cell."""
    lo, hi = edges[:-1], edges[1:]
    # upper-tail form keeps precision for cells far right of zero
    prob = np.where(lo > 0, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))
    pdf_lo, pdf_hi = _normal_pdf(lo), _normal_pdf(hi)
    m1 = pdf_lo - pdf_hi
    with np.errstate(invalid="ignore"):
        xpdf_lo = np.where(np.isinf(lo), 0.0, lo * pdf_lo)
        xpdf_hi = np.where(np.isinf(hi), 0.0, hi * pdf_hi)
    m2 = prob + xpdf_lo - xpdf_hi
    return prob, m1, m2


def _distortion(edges, levels) -> float:
    prob, m1, m2 = _cell_moments(edges)
    return float(np.sum(m2 - 2.0 * levels * m1 + levels * levels * prob))


def _edges(thresholds):
    return np.concatenate(([-np.inf], thresholds, [np.inf]))


def lloyd_max_codebook(bits: int, max_iter: int = MAX_LLOYD_ITER, tol: float = LLOYD_TOL) -> LloydMaxCodebook:
    """MSE-optimal ``2**bits``-level scalar quantizer for the unit Gaussian.

    Thresholds start at the equiprobable quantiles.  Each iteration moves
    every level to the conditional mean of its cell,
    ``(pdf(a) - pdf(b)) / (cdf(b) - cdf(a))``, then resets thresholds to
    midpoints.  Stops once no level moves by ``tol`` or more, or after
    ``max_iter`` iterations (a ``LloydMaxConvergenceWarning`` is issued).
    """
    if isinstance(bits, bool) or int(bits) != bits or not 1 <= bits <= 8:
        raise ValueError(f"bits must be an integer in 1..8, got {bits!r}")
    bits = int(bits)
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    return _lloyd_max_cached(bits, int(max_iter), float(tol))


@lru_cache(maxsize=None)
def _lloyd_max_cached(bits: int, max_iter: int, tol: float) -> LloydMaxCodebook:
    n_levels = 2**bits
    thresholds = ndtri(np.arange(1, n_levels) / n_levels)
    levels = None
    previous = math.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        edges = _edges(thresholds)
        prob, m1, _ = _cell_moments(edges)
        new_levels = m1 / prob
        mse = _distortion(edges, new_levels)
        # centroid and nearest-neighbour steps can only lower the distortion
        # slack covers summation rounding only
        assert mse <= previous + 1e-13, (bits, it, mse, previous)
        previous = mse
        moved = math.inf if levels is None else float(np.max(np.abs(new_levels - levels)))
        levels = new_levels
        thresholds = 0.5 * (levels[:-1] + levels[1:])
        if moved < tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"Lloyd-Max for {bits} bits stopped after {max_iter} iterations without "
            f"reaching tolerance {tol:g}",
            LloydMaxConvergenceWarning,
            stacklevel=3,
        )
    mse = _distortion(_edges(thresholds), levels)
    levels.setflags(write=False)
    thresholds.setflags(write=False)
    return LloydMaxCodebook(bits, levels, thresholds, mse, it, converged)


def clear_lloyd_max_cache() -> None:
    """Drop memoized codebooks (for timing a cold solve)."""
    _lloyd_max_cached.cache_clear()


def lloyd_max_mse(bits: int, max_iter: int = MAX_LLOYD_ITER) -> float:
    """Per-element MSE of the Lloyd-Max quantizer for N(0, 1)."""
    return lloyd_max_codebook(bits, max_iter=max_iter).mse


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MsePoint:
    bits: float
    mse: float

    def __post_init__(self):
        if not (math.isfinite(self.bits) and self.bits > 0):
            raise ValueError(f"bits must be positive, got {self.bits}")
        if not (math.isfinite(self.mse) and self.mse > 0):
            raise ValueError(f"mse must be positive and finite, got {self.mse}")


def fit_exponential(points, quantizer: str = "", component: str = "") -> DistortionModel:
    """Least-squares fit of ``ln mse = ln alpha - b ln beta``."""
    points = list(points)
    for p in points:
        if not p.mse > 0:
            raise CalibrationError(f"mse at {p.bits} bits is {p.mse}; must be positive")
    b = np.array([p.bits for p in points], dtype=np.float64)
    if np.unique(b).size < 2:
        raise CalibrationError("need MSE at two or more distinct bit-widths")
    y = np.log([p.mse for p in points])
    b_mean, y_mean = b.mean(), y.mean()
    slope = float(np.sum((b - b_mean) * (y - y_mean)) / np.sum((b - b_mean) ** 2))
    intercept = float(y_mean - slope * b_mean)
    if slope >= 0:
        raise CalibrationError(
            f"fitted log-MSE slope is {slope:.6g} per bit (beta = {math.exp(-slope):.6g} <= 1); "
            "distortion does not decay with bits"
        )
    resid = y - (intercept + slope * b)
    ss_tot = float(np.sum((y - y_mean) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot
    return DistortionModel(
        alpha=math.exp(intercept),
        beta=math.exp(-slope),
        r_squared=min(max(r2, 0.0), 1.0),
        fit_bits=tuple(sorted(set(b.tolist()))),
        quantizer=quantizer,
        component=component,
    )


@dataclass(frozen=True)
class FitRow:
    bits: float
    measured: float
    fitted: float

    @property
    def ratio(self) -> float:
        return self.fitted / self.measured


@dataclass(frozen=True)
class FitReport:
    rows: tuple
    max_relative_error: float
    worst_bits: float


def fit_quality_report(points, model: DistortionModel) -> FitReport:
    """Fitted/measured ratio at each point and the largest relative error."""
    rows = tuple(FitRow(p.bits, p.mse, eval_distortion(model, p.bits)) for p in points)
    errors = [abs(r.ratio - 1.0) for r in rows]
    worst = int(np.argmax(errors))
    return FitReport(rows=rows, max_relative_error=errors[worst], worst_bits=rows[worst].bits)


# ---------------------------------------------------------------------------
# MSE CSV
# ---------------------------------------------------------------------------

CSV_HEADER = ("quantizer", "component", "bits", "mse")


def write_mse_csv(path, quantizer: str, component: str, points) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for p in points:
            writer.writerow([quantizer, component, f"{float(p.bits):g}", repr(float(p.mse))])


def read_mse_csv(path) -> dict:
    """Map ``(quantizer, component)`` to its list of MsePoint, in file order."""
    out: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                bits, mse = float(row["bits"]), float(row["mse"])
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: unparsable bits/mse") from None
            if not mse > 0:
                raise CalibrationError(f"{path}:{lineno}: mse must be positive, got {mse}")
            out.setdefault((row["quantizer"], row["component"]), []).append(MsePoint(bits, mse))
    return out
