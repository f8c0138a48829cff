"""A short Gibbs run on a small problem, with mixing diagnostics."""
import time

import numpy as np

from lhalf import postsel
from lhalf.datagen import synth_example2
from lhalf.gibbs import GibbsConfig, run_chain
from lhalf.prior import Hyperparams

d, B0, omega, Sigma0 = synth_example2(100, 200, seed=3)
h = Hyperparams(K=15)
t0 = time.perf_counter()
chain = run_chain(d, h, GibbsConfig(n_iter=3000, n_burn=1000, seed=3))
print(f"{chain.n_draws} draws in {time.perf_counter() - t0:.1f} s")

rep = postsel.build_report(chain, Sigma_true=Sigma0)
print(f"effective rank {rep.K_hat} (truth {B0.shape[1]}); FDR {rep.fdr:.3f}; FNR {rep.fnr:.4f}; Frobenius {rep.frob:.1f}")

# mixing of the loadings on the columns that carry signal
ess = postsel.ess_loadings(chain)
active = np.flatnonzero(rep.support_mask.any(axis=0))
print("median ESS per active column:", np.round(np.median(ess[:, active], axis=0)))

# the global shrinkage parameters sort themselves: active columns small
print("posterior mean lambda:", np.round(np.asarray(chain.draws_lambda).mean(axis=0), 1))
