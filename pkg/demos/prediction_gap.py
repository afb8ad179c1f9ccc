"""
How much better is the BLUP than least squares?
===============================================

With no fixed effects and a single random slope (p = 0, q = 1), and m
clusters of size n, n times the drop in squared prediction
error from LS to the empirical BLUP has mean m(m - 4) v^4 / ((m - 2) sigma^2)
as n grows. Errors are paired antithetically, which cancels the large
odd-order noise term and makes a few hundred replicates enough.
"""

import numpy as np

from lmm_fixedm import ModelSpec, Scenario, TrueParams, expected_gap
from lmm_fixedm.simulation import run_gap_study

scenario = Scenario(m=10, size_rule=("balanced", 2000), params=TrueParams((), (1.0,), 1.0),
                    fit_spec=ModelSpec((), (1,)), replications=200, seed=7)
gaps = run_gap_study(scenario, antithetic=True)
pairs = gaps.reshape(-1, 2).mean(axis=1)

print(f"mean n*D = {gaps.mean():.2f} +/- {pairs.std(ddof=1) / np.sqrt(len(pairs)):.2f}")
print(f"limit    = {expected_gap(10, 1.0, 1.0):.2f}")
