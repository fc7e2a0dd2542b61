"""Rate-distortion bit allocation for mixed-precision KV cache quantization."""

from kvbits.allocator import (
    Allocation,
    AllocationProblem,
    Component,
    InfeasibleBudgetError,
    KVAllocation,
    allocate_kv_joint,
    allocate_kv_separate,
    check_kkt,
    continuous_allocate,
    floor_fraction,
    greedy_allocate,
    make_problem,
    marginal_gain_table,
    predict_gain,
    realized_gain,
)
from kvbits.distortion import (
    CalibrationError,
    DistortionModel,
    MsePoint,
    eval_distortion,
    fit_exponential,
    fit_quality_report,
    lloyd_max_codebook,
    lloyd_max_mse,
)
from kvbits.evaluator import SimulationReport, brute_force_integer_optimum, simulate
from kvbits.quantizers import (
    SCHEMES,
    QuantizerSpec,
    hadamard_transform,
    measure_mse,
    quantize_dequantize,
)
from kvbits.sensitivity import (
    SensitivityMap,
    SensitivityStats,
    load_sensitivity,
    save_sensitivity,
    stats,
    synth_lognormal,
)

__version__ = "0.1.0"
