"""
Margins of a one-pass linear classifier
=======================================

Train/test margin gap, single-point membership inference and set-level
dataset inference in the Gaussian linear model.
"""

import numpy as np

from dsinfer.theory import (TheoryParams, monte_carlo_verify, theorem1_gap, theorem2_mi_success,
                            theorem3_di_success, threshold_mi_accuracy)

# %%
# The gap between mean train and test margins grows with the noise dimension.
for D in (10, 100, 400):
    rep = monte_carlo_verify(TheoryParams(10, D, 0.5, 1000), 200, seed=0, checks=("gap",))
    print(f"D={D:4d}  empirical gap {rep.empirical_gap:8.3f}   D*sigma^2 {theorem1_gap(D, 0.5):6.1f}")

# %%
# Membership inference fades as the training set grows. The best single
# threshold follows Phi(sqrt(D/4m)), below the pairwise bound 1 - Phi(-sqrt(D/2m)).
print("\n   m   optimal-t    Phi(sqrt(D/4m))   pairwise bound")
for m in (10, 100, 1000):
    rep = monte_carlo_verify(TheoryParams(10, 100, 0.5, m), 500, seed=0, checks=("mi",))
    print(f"{m:5d}   {rep.optimal_t_mi:.4f}      {threshold_mi_accuracy(100, m):.4f}            "
          f"{theorem2_mi_success(100, m):.4f}")

# %%
# Dataset inference aggregates the same weak per-point signal over m points
# and does not weaken with m.
print("\n   D   m      DI accuracy   closed form")
for D in (8, 36, 100):
    for m in (100, 1000):
        rep = monte_carlo_verify(TheoryParams(10, D, 0.5, m), 400, seed=0, checks=("di",))
        print(f"{D:4d} {m:5d}    {rep.empirical_di:.4f}        {theorem3_di_success(D):.4f}")
