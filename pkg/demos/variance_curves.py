"""Variance of the sign-flip estimator as the positive-phase probability b varies.

Prints the covariance trace on a grid of b for a few negative-phase noise
levels, marks the optimum, and compares with the two-term baseline.

    python3 demos/variance_curves.py
"""
import numpy as np

from flexcl.estimator import (PhaseMoments, estimator_variance_trace,
                              optimal_positive_probability, two_term_variance_trace)

grid = np.round(np.arange(0.1, 0.91, 0.1), 2)
print("trace_cov_neg  " + "  ".join(f"b={b:.1f}" for b in grid) + "   b_min  two-term")
for neg in (0.1, 0.5, 2.0):
    m = PhaseMoments.from_scalars(0.5, neg, mean_sq_pos=0.2, mean_sq_neg=0.2, mean_dot=0.1)
    curve = estimator_variance_trace(m, grid)
    print(f"{neg:13.2f}  " + "  ".join(f"{v:5.2f}" for v in curve)
          + f"   {optimal_positive_probability(m):.3f}  {two_term_variance_trace(m):.2f}")

# noisier negative phases push the optimum towards sampling them more often,
# i.e. towards smaller b
