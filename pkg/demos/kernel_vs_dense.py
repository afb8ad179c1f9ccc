"""
The rank-one inverse kernel against dense algebra
=================================================

H_i = I + sum_k theta_k z_k z_k' is never formed. Its inverse is applied by
a chain of Sherman-Morrison updates, and log det H_i is the sum of the
log pivots. Here the results are compared with numpy on one cluster.
"""

import numpy as np

from lmm_fixedm import Cluster, Dataset, ModelSpec, apply_hinv, build_kernel, logdet_h

rng = np.random.default_rng(0)
n, q = 8, 3
Z = rng.standard_normal((n, q))
theta = np.array([0.5, 2.0, 7.0])
data = Dataset((Cluster(1, rng.standard_normal(n), np.zeros((n, 0)), Z),))

state = build_kernel(data, ModelSpec((), (1, 2, 3)), theta)
H = np.eye(n) + (Z * theta) @ Z.T
x = rng.standard_normal(n)

print("max |H^-1 x - solve(H, x)| =", np.max(np.abs(apply_hinv(state, 0, x) - np.linalg.solve(H, x))))
print("log det: kernel", logdet_h(state), " numpy", np.linalg.slogdet(H)[1])
print("pivots d_s =", state.d[0])
