"""End-to-end synthetic validation of an allocation.

``simulate`` quantizes one seeded unit-Gaussian block per (layer, head,
side) at its allocated bit-width and at the uniform baseline, then compares
the weighted distortions.  Block seeds are ``seed + (layer*H + head)*2 + side``
(side 0 = keys, 1 = values), so every block is independent of the others
and of evaluation order.

When the average bit-width is fractional, the uniform baseline mixes
floor and ceil bit-widths: with ``k`` components needing the extra bit out
of ``n``, component ``i`` (in (side, layer, head) order) gets it when
``floor((i+1)k/n) > floor(ik/n)``, which spreads the extra bits evenly.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from kvbits.allocator import Allocation, AllocationProblem, floor_fraction, objective, predict_gain  # noqa: F401
from kvbits.quantizers import QuantizerSpec, mse, quantize_dequantize, synthetic_block
from kvbits.sensitivity import SensitivityMap

BRUTE_FORCE_MAX_N = 8
BRUTE_FORCE_MAX_STATES = 10**7


class SimulationError(ValueError):
    pass


def block_seed(seed: int, layer: int, head: int, side: int, num_kv_heads: int) -> int:
    return seed + (layer * num_kv_heads + head) * 2 + side


def uniform_bits(total_bits: int, n: int) -> np.ndarray:
    """Integer bit-widths averaging exactly ``total_bits / n``, extras spread evenly."""
    base, extra = divmod(int(total_bits), n)
    i = np.arange(n)
    bump = ((i + 1) * extra) // n > (i * extra) // n
    return base + bump.astype(np.int64)


@dataclass
class SimulationReport:
    j_uniform: float
    j_allocated: float
    realized_ratio: float
    predicted_ratio: float
    per_head_mse: dict
    per_head_bits: dict
    uniform_bits: dict
    seed: int
    config_echo: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write_csv(self, path) -> None:
        """Per-head dump: ``layer,head,side,bits,mse``."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "head", "side", "bits", "mse"])
            for side in ("K", "V"):
                bits, errs = self.per_head_bits[side], self.per_head_mse[side]
                for layer, row in enumerate(errs):
                    for head, value in enumerate(row):
                        writer.writerow([layer, head, side, bits[layer][head], repr(value)])


def simulate(
    sens: SensitivityMap,
    spec_k: QuantizerSpec,
    spec_v: QuantizerSpec,
    bits_k,
    bits_v,
    rows: int = 512,
    cols: int = 128,
    seed: int = 42,
    config_echo: dict | None = None,
) -> SimulationReport:
    """Measure weighted distortion of an allocation against the uniform baseline.

    ``bits_k`` and ``bits_v`` are L x H integer grids (for instance the
    ``bits_k``/``bits_v`` of a ``KVAllocation``).
    """
    L, H = sens.num_layers, sens.num_kv_heads
    grids = []
    for name, grid in (("bits_k", bits_k), ("bits_v", bits_v)):
        g = np.asarray(grid)
        if g.shape != (L, H):
            raise SimulationError(f"{name} has shape {g.shape}, sensitivity map is {L}x{H}")
        if not np.all(g == np.round(g)):
            raise SimulationError(f"{name} must hold integer bit-widths")
        grids.append(g.astype(np.int64))
    alloc_bits = np.concatenate([grids[0].ravel(), grids[1].ravel()])
    base_bits = uniform_bits(int(alloc_bits.sum()), alloc_bits.size)

    weights = sens.all_weights()
    per_mse = np.empty(alloc_bits.size)
    per_mse_uniform = np.empty(alloc_bits.size)
    specs = (spec_k, spec_v)
    for side in (0, 1):
        for layer in range(L):
            for head in range(H):
                i = side * L * H + layer * H + head
                block = synthetic_block(rows, cols, block_seed(seed, layer, head, side, H))
                err = mse(block, quantize_dequantize(block, specs[side], int(alloc_bits[i])))
                per_mse[i] = err
                if base_bits[i] == alloc_bits[i]:
                    per_mse_uniform[i] = err
                else:
                    per_mse_uniform[i] = mse(block, quantize_dequantize(block, specs[side], int(base_bits[i])))

    # fixed summation order for reproducible floating point
    j_alloc = math.fsum((weights * per_mse).tolist())
    j_unif = math.fsum((weights * per_mse_uniform).tolist())
    n = L * H

    def split(a):
        return {"K": a[:n].reshape(L, H).tolist(), "V": a[n:].reshape(L, H).tolist()}

    echo = {
        "rows": rows,
        "cols": cols,
        "seed": seed,
        "spec_k": asdict(spec_k),
        "spec_v": asdict(spec_v),
        "num_layers": L,
        "num_kv_heads": H,
    }
    echo.update(config_echo or {})
    return SimulationReport(
        j_uniform=j_unif,
        j_allocated=j_alloc,
        realized_ratio=j_unif / j_alloc if j_alloc > 0 else math.inf,
        predicted_ratio=predict_gain(weights),
        per_head_mse=split(per_mse),
        per_head_bits={k: [[int(b) for b in r] for r in v] for k, v in split(alloc_bits).items()},
        uniform_bits={k: [[int(b) for b in r] for r in v] for k, v in split(base_bits).items()},
        seed=seed,
        config_echo=echo,
    )


def brute_force_integer_optimum(problem: AllocationProblem) -> Allocation:
    """Exhaustive search over integer allocations; for checking small cases."""
    n = problem.n
    levels = problem.b_max - problem.b_min + 1
    if n > BRUTE_FORCE_MAX_N or levels**n > BRUTE_FORCE_MAX_STATES:
        raise ValueError(
            f"instance too large to enumerate: N={n}, {levels} levels "
            f"(limits N <= {BRUTE_FORCE_MAX_N}, states <= {BRUTE_FORCE_MAX_STATES:.0e})"
        )
    bit_range = np.arange(problem.b_min, problem.b_max + 1)
    # table[i, j] = w_i D_i(b_min + j)
    table = (problem.weights() * problem.alphas())[:, None] * np.power(
        problem.betas()[:, None], -bit_range[None, :].astype(np.float64)
    )
    if n == 1:
        best = np.array([problem.budget])
    else:
        # enumerate the first n-1 components; the budget fixes the last
        head = np.array(list(itertools.product(range(levels), repeat=n - 1)), dtype=np.int64).reshape(-1, n - 1)
        last = problem.budget - n * problem.b_min - head.sum(axis=1)
        ok = (last >= 0) & (last < levels)
        idx = np.column_stack([head[ok], last[ok]])
        cost = table[np.arange(n)[None, :], idx].sum(axis=1)
        best = idx[int(np.argmin(cost))] + problem.b_min
    bits = np.asarray(best, dtype=np.int64)
    bits.setflags(write=False)
    return Allocation(
        bits=bits,
        objective=objective(problem, bits),
        mode="integer",
        ids=tuple(c.id for c in problem.components),
    )


def save_report(report: SimulationReport, path) -> None:
    Path(path).write_text(report.to_json(), encoding="utf-8")
