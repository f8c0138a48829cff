"""Joint-distribution (Geweke) check of the Gibbs sweep on a tiny model.

Marginal-conditional draws come straight from the prior; successive-
conditional draws alternate one sweep with a fresh data draw given the
current state. Both sample the same joint law when the sweep is correct.
"""
import numpy as np

from lhalf.dist import RngStream, sample_gamma, sample_inverse_gamma
from lhalf.gibbs import init_state, sweep
from lhalf.postsel import ess_array
from lhalf.prior import Hyperparams, sample_B_hierarchical

# b = 8 keeps the loadings O(1); a_sigma = 8 and the default a keep the
# sixth moments (needed for the SE of third moments) finite
H_GEWEKE = Hyperparams(b=8.0, a_sigma=8.0, b_sigma=8.0, K=2)
P, K, N = 3, 2, 5


def _draw_data(B, eta, sigma2, gen):
    return (B @ eta).T + gen.standard_normal((eta.shape[1], B.shape[0])) * np.sqrt(sigma2)


def moment_functions(B, sigma2):
    """(draws, names) of the first three moments of every B_jk and sigma2_j."""
    cols, names = [], []
    for m in (1, 2, 3):
        cols.append(B.reshape(B.shape[0], -1) ** m)
        names += [f"B{j}{k}^{m}" for j in range(P) for k in range(K)]
        cols.append(sigma2**m)
        names += [f"s2_{j}^{m}" for j in range(P)]
    return np.concatenate(cols, axis=1), names


def marginal_conditional(M, seed, h=H_GEWEKE):
    gen = np.random.default_rng(seed)
    shape, rate = h.column_shape_rate(K)
    lam = sample_gamma(shape, rate, gen, size=(M, K))
    B, _, _ = sample_B_hierarchical(np.broadcast_to(lam[:, None, :], (M, P, K)), gen)
    sigma2 = sample_inverse_gamma(h.a_sigma, h.b_sigma, gen, size=(M, P))
    return moment_functions(B, sigma2)[0]


def successive_conditional(M, seed, h=H_GEWEKE):
    gen = np.random.default_rng(seed)
    X = gen.standard_normal((N, P))
    state = init_state(X, h, RngStream(seed, (0,)))
    Bs, s2s = np.empty((M, P, K)), np.empty((M, P))
    for t in range(M):
        state = sweep(state, X, h, RngStream(seed, (t + 1,)))
        X = _draw_data(state.B, state.eta, state.sigma2, gen)
        Bs[t], s2s[t] = state.B, state.sigma2
    return moment_functions(Bs, s2s)[0]


def z_scores(mc, sc, burn=1000):
    sc = sc[burn:]
    ess, _ = ess_array(sc)
    se2 = mc.var(axis=0, ddof=1) / mc.shape[0] + sc.var(axis=0, ddof=1) / ess
    return (mc.mean(axis=0) - sc.mean(axis=0)) / np.sqrt(se2)


def run(M=10**5, seed=2024):
    mc = marginal_conditional(M, seed)
    sc = successive_conditional(M, seed + 1)
    names = moment_functions(np.zeros((1, P, K)), np.ones((1, P)))[1]
    return z_scores(mc, sc), names
