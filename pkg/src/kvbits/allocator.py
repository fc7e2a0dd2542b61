"""Bit allocation: reverse waterfilling, greedy integer allocation, gain prediction.

Every component ``i`` has a weight ``w_i`` and a distortion model
``D_i(b) = alpha_i * beta_i**(-b)``.  Given an integer budget ``B`` and
per-component bounds ``[b_min, b_max]``, minimize ``sum_i w_i * D_i(b_i)``
subject to ``sum_i b_i = B``.

``continuous_allocate`` solves the real-valued problem.  At the optimum
every free component has the same marginal ``w_i alpha_i ln(beta_i)
beta_i**(-b_i)`` (the water level); components pinned at ``b_min`` have a
marginal at or below it, those at ``b_max`` at or above.

``greedy_allocate`` hands out bits one at a time to the largest weighted
distortion drop.  Because each component's gains shrink geometrically, this
gives the optimal integer allocation.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from kvbits.distortion import DistortionModel
from kvbits.sensitivity import SensitivityMap, stats

MAX_BITS = 8
BISECTION_ITERS = 200
BUDGET_TOL = 1e-9


class InfeasibleBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class Component:
    """One allocation unit.  ``id`` must be comparable with the other ids."""

    id: object
    weight: float
    model: DistortionModel

    def __post_init__(self):
        if not (math.isfinite(self.weight) and self.weight > 0):
            raise ValueError(f"component {self.id!r}: weight must be finite and positive, got {self.weight}")


@dataclass(frozen=True)
class AllocationProblem:
    components: tuple
    budget: int
    b_min: int = 1
    b_max: int = MAX_BITS

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise ValueError("allocation problem needs at least one component")
        if len({c.id for c in comps}) != len(comps):
            raise ValueError("component ids must be unique")
        if int(self.b_min) != self.b_min or int(self.b_max) != self.b_max or int(self.budget) != self.budget:
            raise ValueError("budget and bounds must be integers")
        if self.b_min < 1:
            raise InfeasibleBudgetError(f"b_min must be >= 1, got {self.b_min}")
        if self.b_max > MAX_BITS:
            raise InfeasibleBudgetError(f"b_max must be <= {MAX_BITS}, got {self.b_max}")
        if self.b_min > self.b_max:
            raise InfeasibleBudgetError(f"b_min={self.b_min} exceeds b_max={self.b_max}")
        n = len(comps)
        if self.budget < n * self.b_min:
            raise InfeasibleBudgetError(
                f"budget {self.budget} is below N*b_min = {n}*{self.b_min} = {n * self.b_min}"
            )
        if self.budget > n * self.b_max:
            raise InfeasibleBudgetError(
                f"budget {self.budget} exceeds N*b_max = {n}*{self.b_max} = {n * self.b_max}"
            )

    @property
    def n(self) -> int:
        return len(self.components)

    @property
    def avg_bits(self) -> float:
        return self.budget / self.n

    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    def alphas(self) -> np.ndarray:
        return np.array([c.model.alpha for c in self.components])

    def betas(self) -> np.ndarray:
        return np.array([c.model.beta for c in self.components])

    def shared_model(self) -> bool:
        first = self.components[0].model
        return all(c.model.alpha == first.alpha and c.model.beta == first.beta for c in self.components)


def budget_for(avg_bits: float, n: int) -> int:
    """round(avg_bits * n), ties to even."""
    return int(round(avg_bits * n))


def make_problem(weights, model: DistortionModel, avg_bits=None, budget=None, b_min=1, b_max=MAX_BITS):
    """Problem with one shared model; give either ``avg_bits`` or ``budget``."""
    weights = list(weights)
    if (avg_bits is None) == (budget is None):
        raise ValueError("give exactly one of avg_bits and budget")
    if budget is None:
        budget = budget_for(avg_bits, len(weights))
    comps = tuple(Component(i, float(w), model) for i, w in enumerate(weights))
    return AllocationProblem(comps, int(budget), b_min, b_max)


@dataclass(frozen=True)
class Allocation:
    bits: np.ndarray
    objective: float
    mode: str
    water_level: float | None = None
    iterations: int = 0
    ids: tuple = field(default=(), repr=False)


def objective(problem: AllocationProblem, bits) -> float:
    """sum_i w_i * alpha_i * beta_i**(-b_i), summed in component order."""
    bits = np.asarray(bits, dtype=np.float64)
    terms = problem.weights() * problem.alphas() * np.power(problem.betas(), -bits)
    total = 0.0
    for t in terms:
        total += float(t)
    return total


def marginals(problem: AllocationProblem, bits) -> np.ndarray:
    """w_i * alpha_i * ln(beta_i) * beta_i**(-b_i)."""
    bits = np.asarray(bits, dtype=np.float64)
    betas = problem.betas()
    return problem.weights() * problem.alphas() * np.log(betas) * np.power(betas, -bits)


def _finish(problem, bits, mode, water_level=None, iterations=0) -> Allocation:
    bits = np.asarray(bits)
    bits.setflags(write=False)
    return Allocation(
        bits=bits,
        objective=objective(problem, bits),
        mode=mode,
        water_level=water_level,
        iterations=iterations,
        ids=tuple(c.id for c in problem.components),
    )


# ---------------------------------------------------------------------------
# Continuous reverse waterfilling
# ---------------------------------------------------------------------------


def closed_form_bits(weights, beta: float, avg_bits: float) -> np.ndarray:
    """Unbounded optimum for a shared model: b_i = avg + (ln w_i - mean ln w) / ln beta."""
    logw = np.log(np.asarray(weights, dtype=np.float64))
    return avg_bits + (logw - logw.mean()) / math.log(beta)


def _water_bits(log_level, log_c, log_beta):
    # unclipped b_i(lambda) = (ln(w_i alpha_i ln beta_i) - ln lambda) / ln beta_i
    return (log_c - log_level) / log_beta


def continuous_allocate(problem: AllocationProblem) -> Allocation:
    """Real-valued optimum of the weighted-distortion problem.

    Shared model with no binding bound: the closed form.  Otherwise the
    water level is bracketed and bisected (in log space) on the clipped
    allocation, then the pinned set is frozen and the free components are
    re-solved exactly; components that leave their bounds are pinned and
    the solve repeats, as in iterative waterfilling (at most N rounds).
    """
    n = problem.n
    lo, hi = float(problem.b_min), float(problem.b_max)
    budget = float(problem.budget)

    if problem.shared_model():
        b = closed_form_bits(problem.weights(), problem.components[0].model.beta, problem.avg_bits)
        if np.all(b >= lo) and np.all(b <= hi):
            level = float(marginals(problem, b).mean())
            return _finish(problem, b, "continuous", water_level=level)

    log_beta = np.log(problem.betas())
    log_c = np.log(problem.weights() * problem.alphas() * log_beta)

    if problem.budget == n * problem.b_min or problem.budget == n * problem.b_max:
        b = np.full(n, lo if problem.budget == n * problem.b_min else hi)
        m = marginals(problem, b)
        level = float(m.max() if problem.budget == n * problem.b_min else m.min())
        return _finish(problem, b, "continuous", water_level=level)

    # bracket: at the largest marginal at b_min everyone sits at b_min,
    # at the smallest marginal at b_max everyone sits at b_max
    log_hi_level = float(np.max(log_c - lo * log_beta))
    log_lo_level = float(np.min(log_c - hi * log_beta))

    def clipped(log_level):
        return np.clip(_water_bits(log_level, log_c, log_beta), lo, hi)

    a, z = log_lo_level, log_hi_level
    log_level = 0.5 * (a + z)
    iterations = 0
    for iterations in range(1, BISECTION_ITERS + 1):
        log_level = 0.5 * (a + z)
        excess = float(np.sum(clipped(log_level))) - budget
        if abs(excess) < BUDGET_TOL:
            break
        if excess > 0:
            a = log_level  # too many bits: raise the water level
        else:
            z = log_level

    raw = _water_bits(log_level, log_c, log_beta)
    pinned_lo = raw <= lo
    pinned_hi = raw >= hi

    bits = np.clip(raw, lo, hi)
    for _ in range(n + 1):
        iterations += 1
        free = ~(pinned_lo | pinned_hi)
        if not free.any():
            bits = np.where(pinned_lo, lo, hi)
            break
        rest = budget - lo * pinned_lo.sum() - hi * pinned_hi.sum()
        inv = 1.0 / log_beta[free]
        # sum over free of (log_c - L) / log_beta = rest  =>  L in closed form
        log_level = float((np.sum(log_c[free] * inv) - rest) / np.sum(inv))
        raw = _water_bits(log_level, log_c, log_beta)
        below = free & (raw < lo)
        above = free & (raw > hi)
        if below.any() or above.any():
            pinned_lo |= below
            pinned_hi |= above
            continue
        # release pins that the new level no longer justifies
        release = (pinned_lo & (raw > lo)) | (pinned_hi & (raw < hi))
        if release.any():
            pinned_lo &= ~release
            pinned_hi &= ~release
            continue
        bits = np.where(pinned_lo, lo, np.where(pinned_hi, hi, raw))
        break

    return _finish(problem, bits, "continuous", water_level=math.exp(log_level), iterations=iterations)


@dataclass(frozen=True)
class KKTReport:
    stationarity_spread: float
    lower_violation: float
    upper_violation: float
    budget_error: float
    bound_violation: float
    num_free: int
    n: int

    def ok(self, rtol: float = 1e-7, btol: float = 1e-9) -> bool:
        return (
            self.stationarity_spread <= rtol
            and self.lower_violation <= rtol
            and self.upper_violation <= rtol
            and self.budget_error <= btol * self.n
            and self.bound_violation <= btol
        )


def check_kkt(problem: AllocationProblem, alloc: Allocation, bound_tol: float = 1e-9) -> KKTReport:
    """Measure how far a continuous allocation is from the KKT conditions.

    Components within ``bound_tol`` of a bound count as pinned.  The water
    level is the mean marginal of the free components (or, with none free,
    the tightest level consistent with the pins).  Violations are relative
    to that level.
    """
    b = np.asarray(alloc.bits, dtype=np.float64)
    m = marginals(problem, b)
    at_lo = b <= problem.b_min + bound_tol
    at_hi = b >= problem.b_max - bound_tol
    free = ~(at_lo | at_hi)
    if free.any():
        level = float(np.mean(m[free]))
        spread = float((m[free].max() - m[free].min()) / level)
    else:
        level = float(m[at_lo].max()) if at_lo.any() else float(m[at_hi].min())
        spread = 0.0
    lower = float(max(0.0, (m[at_lo].max() - level) / level)) if at_lo.any() else 0.0
    upper = float(max(0.0, (level - m[at_hi].min()) / level)) if at_hi.any() else 0.0
    return KKTReport(
        stationarity_spread=spread,
        lower_violation=lower,
        upper_violation=upper,
        budget_error=abs(float(b.sum()) - problem.budget),
        bound_violation=float(max(0.0, problem.b_min - b.min(), b.max() - problem.b_max)),
        num_free=int(free.sum()),
        n=problem.n,
    )


# ---------------------------------------------------------------------------
# Greedy integer allocation
# ---------------------------------------------------------------------------


def _gain(comp: Component, b: int) -> float:
    m = comp.model
    return comp.weight * (m.alpha * m.beta ** (-b) - m.alpha * m.beta ** (-(b + 1)))


def greedy_allocate(problem: AllocationProblem) -> Allocation:
    """Start everyone at b_min; give each remaining bit to the largest gain.

    Equal gains go to the lowest component id.  A heap keeps each grant at
    O(log N).
    """
    comps = problem.components
    bits = [problem.b_min] * problem.n
    heap = [(-_gain(c, problem.b_min), c.id, i) for i, c in enumerate(comps) if problem.b_min < problem.b_max]
    heapq.heapify(heap)
    remaining = problem.budget - problem.n * problem.b_min
    while remaining > 0:
        _, cid, i = heapq.heappop(heap)
        bits[i] += 1
        remaining -= 1
        if bits[i] < problem.b_max:
            heapq.heappush(heap, (-_gain(comps[i], bits[i]), cid, i))
    return _finish(problem, np.array(bits, dtype=np.int64), "integer")


def marginal_gain_table(components, bits, b_max: int = MAX_BITS) -> list:
    """``(id, w * (D(b) - D(b+1)))`` for every component below ``b_max``, largest first."""
    rows = [(c.id, _gain(c, int(b))) for c, b in zip(components, bits) if b < b_max]
    return sorted(rows, key=lambda r: (-r[1], r[0]))


# ---------------------------------------------------------------------------
# Gain ratio
# ---------------------------------------------------------------------------


def predict_gain(weights) -> float:
    """Arithmetic over geometric mean of the weights (>= 1)."""
    return stats(weights).am_gm_ratio


def uniform_objective(problem: AllocationProblem) -> float:
    """Objective with every component at avg_bits (fractional allowed)."""
    return objective(problem, np.full(problem.n, problem.avg_bits))


def realized_gain(problem: AllocationProblem) -> float:
    """J(uniform at avg_bits) / J(continuous optimum)."""
    return uniform_objective(problem) / continuous_allocate(problem).objective


def floor_fraction(alloc: Allocation, b_min, tol: float = 1e-9) -> float:
    """Share of components sitting at ``b_min``."""
    b = np.asarray(alloc.bits, dtype=np.float64)
    return float(np.mean(np.abs(b - b_min) <= tol))


# ---------------------------------------------------------------------------
# Keys and values as 2N components
# ---------------------------------------------------------------------------

SIDES = ("K", "V")


@dataclass(frozen=True)
class KVAllocation:
    """A per-head allocation reshaped to L x H grids for keys and values."""

    problem: AllocationProblem
    allocation: Allocation
    bits_k: np.ndarray
    bits_v: np.ndarray
    avg_bits: float
    mode: str

    @property
    def mean_bits_k(self) -> float:
        return float(np.mean(self.bits_k))

    @property
    def mean_bits_v(self) -> float:
        return float(np.mean(self.bits_v))


def kv_problem(sens: SensitivityMap, model_k, model_v, avg_bits, b_min=2, b_max=MAX_BITS) -> AllocationProblem:
    """2N components with ids ``(side, layer, head)``, keys first."""
    comps = []
    for side, grid, model in (("K", sens.weights_k, model_k), ("V", sens.weights_v, model_v)):
        for layer in range(sens.num_layers):
            for head in range(sens.num_kv_heads):
                comps.append(Component((side, layer, head), float(grid[layer, head]), model))
    return AllocationProblem(tuple(comps), budget_for(avg_bits, len(comps)), b_min, b_max)


def _solve(problem, method):
    if method == "greedy":
        return greedy_allocate(problem)
    if method == "continuous":
        return continuous_allocate(problem)
    raise ValueError(f"unknown method {method!r}; expected 'greedy' or 'continuous'")


def allocate_kv_separate(
    sens: SensitivityMap,
    model_k: DistortionModel,
    model_v: DistortionModel,
    avg_bits: float,
    b_min: int = 2,
    b_max: int = MAX_BITS,
    method: str = "greedy",
) -> KVAllocation:
    """Allocate keys and values as independent components with their own models.

    Budget is ``round(avg_bits * 2N)`` with ties to even.
    """
    problem = kv_problem(sens, model_k, model_v, avg_bits, b_min, b_max)
    alloc = _solve(problem, method)
    n = sens.num_heads
    shape = (sens.num_layers, sens.num_kv_heads)
    return KVAllocation(
        problem=problem,
        allocation=alloc,
        bits_k=np.asarray(alloc.bits[:n]).reshape(shape),
        bits_v=np.asarray(alloc.bits[n:]).reshape(shape),
        avg_bits=float(avg_bits),
        mode="separate",
    )


def allocate_kv_joint(
    sens: SensitivityMap,
    model: DistortionModel,
    avg_bits: float,
    b_min: int = 2,
    b_max: int = MAX_BITS,
    method: str = "greedy",
) -> KVAllocation:
    """One bit-width per head shared by its key and value caches.

    Each head is a single component with weight ``w_K + w_V`` under one
    model; the budget is ``round(avg_bits * N)`` per side.
    """
    shape = (sens.num_layers, sens.num_kv_heads)
    total = sens.weights_k + sens.weights_v
    comps = tuple(
        Component((layer, head), float(total[layer, head]), model)
        for layer in range(sens.num_layers)
        for head in range(sens.num_kv_heads)
    )
    problem = AllocationProblem(comps, budget_for(avg_bits, len(comps)), b_min, b_max)
    alloc = _solve(problem, method)
    grid = np.asarray(alloc.bits).reshape(shape)
    return KVAllocation(problem, alloc, grid, grid.copy(), float(avg_bits), "joint")
