"""The L1/2 shrinkage prior on factor loadings.

Each loading has density ``(lam**2 / 4) * exp(-lam * |b|**0.5)`` given its
column's global parameter ``lam_k ~ Gamma(a + k**c1, b / k**c2)``.  The
Gaussian scale-mixture form is

    B | tau2, lam ~ N(0, tau2 / lam**4)
    tau2 | v      ~ Exponential(rate = 1 / (2 v**2))
    v             ~ Gamma(3/2, rate = 1/4)
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .dist import ParameterDomainError, as_generator, sample_gamma

__all__ = [
    "Hyperparams",
    "TheoryConditionWarning",
    "lambda_prior_params",
    "log_density_B",
    "sample_B_direct",
    "sample_B_hierarchical",
    "sample_loadings",
    "truncation_bound",
    "truncation_tail_frequency",
    "shrinkage_prob_mc",
]


class TheoryConditionWarning(UserWarning):
    """Hyperparameters violate ``a >= 4`` and ``c1 + c2 > 1/4``."""


@dataclass(frozen=True)
class Hyperparams:
    a: float = 15.0
    c1: float = 2.3
    c2: float = 0.7
    b: float = 1.0
    a_sigma: float = 1.0
    b_sigma: float = 1.0
    K: int = 50

    def __post_init__(self):
        for name in ("a", "c1", "c2", "b", "a_sigma", "b_sigma"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ParameterDomainError(f"{name} must be finite and > 0, got {val}")
        if int(self.K) != self.K or self.K < 1:
            raise ParameterDomainError(f"K must be a positive integer, got {self.K}")
        if not self.theory_valid:
            warnings.warn(
                f"a={self.a}, c1+c2={self.c1 + self.c2}: the prior is not guaranteed to "
                "give a well-defined covariance (needs a >= 4 and c1 + c2 > 1/4)",
                TheoryConditionWarning,
                stacklevel=3,
            )

    @property
    def theory_valid(self) -> bool:
        return self.a >= 4 and self.c1 + self.c2 > 0.25

    def column_shape_rate(self, K=None):
        """Prior (shape, rate) arrays of ``lam_k`` for k = 1..K."""
        k = np.arange(1, (K or self.K) + 1, dtype=float)
        return self.a + k**self.c1, self.b / k**self.c2

    def to_dict(self):
        return asdict(self)


def lambda_prior_params(k: int, h: Hyperparams) -> tuple[float, float]:
    if int(k) != k or k < 1:
        raise ParameterDomainError(f"column index k must be >= 1, got {k}")
    return h.a + k**h.c1, h.b / k**h.c2


def log_density_B(b_val, lam):
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam > 0)):
        raise ParameterDomainError("lambda must be > 0")
    return 2.0 * np.log(lam) - math.log(4.0) - lam * np.sqrt(np.abs(b_val))


def sample_B_direct(lam, rng, size=None):
    """Exact draw: ``|B|**0.5 ~ Gamma(2, lam)`` with a fair random sign."""
    gen = as_generator(rng)
    y = sample_gamma(2.0, lam, gen, size=size)
    sign = np.where(gen.random(np.shape(y)) < 0.5, -1.0, 1.0)
    return sign * y * y


def sample_B_hierarchical(lam, rng, size=None):
    """Draw ``(B, tau2, v)`` through the three-level Gaussian mixture."""
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam > 0)):
        raise ParameterDomainError("lambda must be > 0")
    gen = as_generator(rng)
    if size is None:
        size = lam.shape
    v = sample_gamma(1.5, 0.25, gen, size=size)
    tau2 = gen.exponential(2.0 * v * v)
    B = gen.standard_normal(size) * np.sqrt(tau2) / lam**2
    return B, tau2, v


def sample_loadings(p: int, K: int, h: Hyperparams, rng):
    """One prior draw of ``(B, lam)`` with ``B`` of shape (p, K)."""
    gen = as_generator(rng)
    shape, rate = h.column_shape_rate(K)
    lam = sample_gamma(shape, rate, gen)
    B = sample_B_direct(np.broadcast_to(lam, (p, K)), gen)
    return B, lam


def truncation_bound(K: int, p: int, eps: float, h: Hyperparams):
    """Tail bound on the sup-norm error of truncating to K columns.

    Returns ``(H, bound, K_min)``; the bound is only asserted for ``K > K_min``.
    """
    s = h.c1 + h.c2
    if s <= 0.25:
        raise ParameterDomainError("c1 + c2 must exceed 1/4")
    if eps <= 0:
        raise ParameterDomainError("eps must be > 0")
    H = 480.0 * s / (4.0 * s - 1.0)
    bound = 2.0 * H * p / (eps * (K + 1) ** (4.0 * s))
    K_min = (4.0 * H / (3.0 * eps)) ** (1.0 / (4.0 * s)) - 1.0
    return H, bound, K_min


def truncation_tail_frequency(K_values, p, K_big, eps, M, h: Hyperparams, rng):
    """Empirical frequency of ``d_inf(Sigma, Sigma_K) > eps`` over M prior draws.

    ``Sigma`` uses the first ``K_big`` columns as a stand-in for the infinite
    matrix; the idiosyncratic part cancels in the difference.
    """
    gen = as_generator(rng)
    K_values = np.atleast_1d(K_values).astype(int)
    exceed = np.zeros(len(K_values))
    for _ in range(M):
        B, _ = sample_loadings(p, K_big, h, gen)
        # tail[K] = B[:, K:] B[:, K:]^T accumulated from the last column down
        tail = np.zeros((p, p))
        dist = {}
        for k in range(K_big - 1, -1, -1):
            tail += np.outer(B[:, k], B[:, k])
            dist[k] = np.abs(tail).max()
        for i, K in enumerate(K_values):
            exceed[i] += (dist[K] if K < K_big else 0.0) > eps
    return exceed / M


def shrinkage_prob_mc(k: int, eps, N: int, h: Hyperparams, rng):
    """Monte Carlo estimate of ``P(|B_jk| <= eps)`` and its standard error.

    ``eps`` may be an array; all thresholds share the same N draws.
    """
    if N < 1000:
        raise ParameterDomainError("N must be at least 1000")
    gen = as_generator(rng)
    shape, rate = lambda_prior_params(k, h)
    lam = sample_gamma(shape, rate, gen, size=N)
    absB = np.abs(sample_B_direct(lam, gen))
    eps_arr = np.asarray(eps, dtype=float)
    hits = absB[:, None] <= eps_arr.reshape(1, -1)
    est = hits.mean(axis=0)
    se = np.sqrt(est * (1.0 - est) / N)
    if eps_arr.ndim == 0:
        return float(est[0]), float(se[0])
    return est.reshape(eps_arr.shape), se.reshape(eps_arr.shape)
