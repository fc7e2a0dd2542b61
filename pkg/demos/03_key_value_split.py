"""
Splitting bits between keys and values
======================================

Keys and values are quantized by different schemes with different decay
rates, so they are allocated as separate components.
"""

import numpy as np

from kvbits.allocator import allocate_kv_separate
from kvbits.distortion import DistortionModel
from kvbits.sensitivity import SensitivityMap

# per-channel keys decay faster than per-token values
key_model = DistortionModel(17.87, 5.09)
value_model = DistortionModel(4.65, 4.55)

ones = np.ones((4, 8))
sens = SensitivityMap(4, 8, ones, ones, source_label="equal")

for method in ("continuous", "greedy"):
    kv = allocate_kv_separate(sens, key_model, value_model, 2.5, b_min=2, b_max=8, method=method)
    print(f"{method:>10}: keys {kv.mean_bits_k:.3f} bits, values {kv.mean_bits_v:.3f} bits")

# at integer resolution the spare half bit per head all goes to keys:
# a key going 2 -> 3 saves more than a value going 2 -> 3, and that in
# turn saves more than a key going 3 -> 4
for name, m in (("key", key_model), ("value", value_model)):
    print(name, [round(float(m(b) - m(b + 1)), 4) for b in (2, 3)])
