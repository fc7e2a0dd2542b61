"""
Calibrating the built-in quantizers
===================================

Measure MSE on synthetic unit-Gaussian blocks at 2..6 bits and fit a
decay rate per scheme.  A Hadamard rotation pays off once the data has
outliers.
"""

from kvbits.distortion import fit_exponential
from kvbits.quantizers import SCHEMES, QuantizerSpec, measure_mse

for scheme in SCHEMES:
    points = measure_mse(QuantizerSpec(scheme, seed=42), [2, 3, 4, 5, 6], rows=1024, cols=128, seed=42)
    model = fit_exponential(points, quantizer=scheme)
    print(f"{scheme:30s} alpha={model.alpha:8.4f} beta={model.beta:.3f} r2={model.r_squared:.4f}")

# about 1% of entries scaled by 20
print("\nheavy-tailed data, per-token symmetric vs rotated:")
for bits in (3, 4, 5):
    plain = measure_mse(QuantizerSpec("per_token_symmetric"), [bits], dist="heavy_tailed", rows=1024, seed=1)
    rotated = measure_mse(QuantizerSpec("hadamard", seed=1), [bits], dist="heavy_tailed", rows=1024, seed=1)
    print(f"  {bits} bits: {plain[0].mse:.4f} vs {rotated[0].mse:.4f}")
