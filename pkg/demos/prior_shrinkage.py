"""How the prior shrinks later columns harder, and what truncation costs."""
import numpy as np

from lhalf.dist import RngStream
from lhalf.prior import Hyperparams, lambda_prior_params, sample_loadings, shrinkage_prob_mc, truncation_bound

h = Hyperparams()
print("column shape/rate of the lambda prior (k = 1..6):")
for k in range(1, 7):
    shape, rate = lambda_prior_params(k, h)
    print(f"  k={k}: shape {shape:8.2f}  rate {rate:.3f}  mean lambda {shape / rate:9.1f}")

# the chance a loading is within eps of zero rises with the column index
eps = np.array([0.01, 0.1, 1.0])
print("\nP(|B_k| <= eps) for eps = 0.01, 0.1, 1:")
for k in range(1, 6):
    est, se = shrinkage_prob_mc(k, eps, 200_000, h, RngStream(0, k))
    print(f"  k={k}: " + "  ".join(f"{e:.4f}" for e in est))

# a draw of the loadings: the column norms fall off quickly
B, lam = sample_loadings(p=200, K=10, h=h, rng=RngStream(1))
print("\ncolumn norms of one prior draw:", np.round(np.linalg.norm(B, axis=0), 4))

# bound on P(max |Sigma - Sigma_K| > eps) for p = 20
print("\ntruncation tail bound, p = 20, eps = 0.1:")
for K in (2, 3, 5, 8):
    print(f"  K={K}: {truncation_bound(K, 20, 0.1, h)[1]:.3e}")
