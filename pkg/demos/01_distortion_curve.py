"""
Distortion-rate curve of the Gaussian Lloyd-Max quantizer
==========================================================

Compute the optimal scalar quantizer for N(0, 1) at 1..6 bits, then fit
D(b) = alpha * beta**(-b) to the MSE values.
"""

from kvbits.distortion import MsePoint, fit_exponential, fit_quality_report, lloyd_max_codebook

# each codebook is solved once and cached
books = {b: lloyd_max_codebook(b) for b in range(1, 7)}
for b, book in books.items():
    print(f"{b} bits: mse={book.mse:.4e} after {book.iterations} iterations")

# a straight line in log(MSE) vs bits
points = [MsePoint(b, book.mse) for b, book in books.items()]
model = fit_exponential(points, quantizer="lloyd_max_gaussian")
print(f"\nalpha={model.alpha:.4f}  beta={model.beta:.4f}  r2={model.r_squared:.5f}")

# the fit is worst at one bit, where the curve bends
report = fit_quality_report(points, model)
for row in report.rows:
    print(f"  b={row.bits:g}  measured={row.measured:.4e}  fitted={row.fitted:.4e}  ratio={row.ratio:.3f}")
