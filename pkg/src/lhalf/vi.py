"""Collapsed variational inference under the L1/2 prior.

Each loading row gets a multivariate-t factor ``t_nu(mu_j, Lambda_j^-1)``,
factor scores and noise variances get Gaussian / inverse-gamma factors.
The shrinkage parameters are integrated out; their effect on the row
updates enters through a local quadratic (MM) minorizer of the collapsed
log-prior whose weights ``W`` are re-localised once per outer iteration.

One outer iteration:

    q(eta) -> q(sigma2) -> T1 natural-gradient steps on (mu, Lambda)
           -> one MC gradient in o = nu - 2 -> T2 exponentiated-gradient steps
"""
from __future__ import annotations

import contextlib
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaln
from threadpoolctl import threadpool_limits

from . import storage
from .dist import (
    NotPositiveDefiniteError,
    NumericError,
    RngStream,
    as_generator,
    digamma,
    spd_factor,
    tri_solve_lower,
    tri_solve_upper_t,
    trigamma,
)
from .prior import Hyperparams
from .state import Dataset

__all__ = [
    "VIConfig",
    "VIState",
    "VIDivergenceError",
    "init_state",
    "update_q_eta",
    "update_q_sigma",
    "mm_weight",
    "mm_weights",
    "euclidean_grad",
    "natgrad_direction",
    "natgrad_step_mu_lambda",
    "surrogate_objective",
    "entropy_mvt",
    "entropy_grad_o",
    "sample_q_z",
    "grad_o",
    "grad_o_exact",
    "mirror_step_o",
    "collapsed_log_prior",
    "monitor_objective",
    "run_vi",
    "save_state",
    "load_state",
]

MM_FLOOR = 1e-9
_TINY = np.finfo(float).tiny
EXP_CLAMP = 20.0


class VIDivergenceError(NumericError):
    pass


ANCHORS = ("adaptive", "mean", "second_moment")


@dataclass(frozen=True)
class VIConfig:
    T1: int = 20
    T2: int = 5
    rho0: float = 0.1
    decay: float = 0.01
    mc_samples: int = 16
    tol: float = 1e-4
    max_outer: int = 300
    seed: int = 0
    threads: int | None = None
    nu_init: float = 10.0
    # a decrease larger than noise_tol * |L| counts as a real drop; with
    # keep_best a mean-anchored drop ends the run and the previous iterate
    # is returned, otherwise patience consecutive drops abort the run
    patience: int = 10
    noise_tol: float = 1e-7
    keep_best: bool = True
    check_invariants: bool = False
    # where the quadratic minorizer of log pi(B) touches: "mean" uses the
    # previous means, "second_moment" uses sqrt(E[B^2]), the tightest choice;
    # "adaptive" starts with "mean" and switches at the first real drop
    anchor: str = "adaptive"

    def __post_init__(self):
        if not 0 < self.rho0 <= 1:
            raise ValueError("rho0 must lie in (0, 1]")
        if self.decay < 0 or self.tol <= 0:
            raise ValueError("decay must be >= 0 and tol > 0")
        if min(self.T1, self.T2, self.mc_samples, self.max_outer, self.patience) < 1:
            raise ValueError("T1, T2, mc_samples, max_outer and patience must be >= 1")
        if self.anchor not in ANCHORS:
            raise ValueError(f"anchor must be one of {ANCHORS}")
        if not self.nu_init > 2:
            raise ValueError("nu_init must exceed 2")

    def rho(self, t):
        return self.rho0 / (1.0 + self.decay * t)


@dataclass
class VIState:
    """Variational parameters; ``Lambda`` is (p, K, K), ``w`` is K x n."""

    mu: np.ndarray
    Lambda: np.ndarray
    nu: np.ndarray
    sig_shape: np.ndarray
    sig_rate: np.ndarray
    w: np.ndarray
    Phi: np.ndarray
    c: np.ndarray
    trace: dict = field(default_factory=dict)

    @property
    def p(self):
        return self.mu.shape[0]

    @property
    def K(self):
        return self.mu.shape[1]

    @property
    def o(self):
        return self.nu - 2.0

    def row_cov(self, Lambda_inv=None):
        """``Cov(B_j) = nu_j / (nu_j - 2) * Lambda_j^-1`` as a (p, K, K) stack."""
        if Lambda_inv is None:
            Lambda_inv = np.linalg.inv(self.Lambda)
        return _kappa(self.nu)[:, None, None] * Lambda_inv

    def check(self):
        spd_factor(self.Lambda)
        spd_factor(self.Phi)
        if not np.all(self.nu > 2):
            raise AssertionError("every nu_j must exceed 2")
        ev = np.linalg.eigvalsh(self.Phi)
        if ev.max() > 1 + 1e-10 or ev.min() <= 0:
            raise AssertionError("Phi eigenvalues must lie in (0, 1]")
        for name in ("mu", "sig_shape", "sig_rate", "w", "c"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise AssertionError(f"{name} has non-finite entries")


# ---------------------------------------------------------------- closed-form factors


def _G(state):
    return state.w @ state.w.T + state.w.shape[1] * state.Phi


def _trace_with(stack, G):
    """tr(S_j G) for every matrix S_j of a stack; G symmetric."""
    return np.einsum("jkl,kl->j", stack, G, optimize=True)


def update_q_eta(state: VIState, X, Lambda_inv=None):
    """Shared factor covariance Phi and factor means w (K x n)."""
    K = state.K
    cov = state.row_cov(Lambda_inv)
    A = np.einsum("j,jkl->kl", state.c, cov)
    Cmu = state.mu * state.c[:, None]
    P = np.eye(K) + state.mu.T @ Cmu + A
    P = 0.5 * (P + P.T)
    L = spd_factor(P)
    Linv = tri_solve_lower(L, np.eye(K))
    Phi = Linv.T @ Linv
    w = Phi @ (Cmu.T @ X.T)
    return w, Phi


def update_q_sigma(state: VIState, X, h: Hyperparams, Lambda_inv=None):
    n = X.shape[0]
    G = _G(state)
    resid = X - (state.mu @ state.w).T
    ssr = np.einsum("ij,ij->j", resid, resid)
    quad = np.einsum("jk,kl,jl->j", state.mu, state.Phi, state.mu)
    tr = _trace_with(state.row_cov(Lambda_inv), G)
    rate = h.b_sigma + 0.5 * ssr + 0.5 * n * quad + 0.5 * tr
    bad = np.flatnonzero(~(rate > 0) | ~np.isfinite(rate))
    if bad.size:
        raise NumericError(f"invalid noise rate for row {int(bad[0])}", index=int(bad[0]))
    shape = np.full(state.p, h.a_sigma + 0.5 * n)
    return shape, rate


# ---------------------------------------------------------------- MM weights


def mm_weights(mu_prev, h: Hyperparams, floor=MM_FLOOR):
    """Local quadratic weights E[lam_k^4 / tau_jk^2 | B* = mu_prev] (p x K).

    Entries with |B*|^1.5 below ``floor`` get a capped weight; the quadratic
    is then no longer a minorizer for them.
    """
    p, K = mu_prev.shape
    absmu = np.abs(mu_prev)
    alpha, beta = h.column_shape_rate(K)
    colsum = np.sqrt(absmu).sum(axis=0) + beta
    return (p + 0.5 * alpha) / (np.maximum(absmu**1.5, floor) * colsum)


def second_moment_anchor(state: VIState, Lambda_inv=None):
    """sqrt(E_q[B_jk^2]) for every entry.

    log pi(B) is convex in the squared loadings, so its tangent plane is a
    minorizer and E_q of that tangent is largest when it touches at E_q[B^2].
    """
    if Lambda_inv is None:
        Lambda_inv = np.linalg.inv(state.Lambda)
    var = _kappa(state.nu)[:, None] * np.diagonal(Lambda_inv, axis1=1, axis2=2)
    return np.sqrt(state.mu**2 + var)


def anchor_for(state: VIState, kind, Lambda_inv=None):
    return state.mu.copy() if kind == "mean" else second_moment_anchor(state, Lambda_inv)


def mm_weight(mu_prev, j, k, h: Hyperparams) -> float:
    """Single weight; ``k`` is the 1-based column index, ``j`` 0-based."""
    return float(mm_weights(mu_prev, h)[j, k - 1])


# ---------------------------------------------------------------- surrogate and its gradients


def _kappa(nu):
    return nu / (nu - 2.0)


def entropy_mvt(Lambda, nu, K=None):
    """Entropy of a K-variate t with precision-like matrix Lambda (stacks allowed)."""
    Lambda = np.asarray(Lambda, dtype=float)
    if Lambda.ndim < 2:
        Lambda = Lambda.reshape(1, 1)
    K = Lambda.shape[-1] if K is None else K
    _, logdet = np.linalg.slogdet(Lambda)
    nu = np.asarray(nu, dtype=float)
    hv = (
        gammaln(nu / 2)
        - gammaln((nu + K) / 2)
        + 0.5 * K * np.log(nu * np.pi)
        + 0.5 * (nu + K) * (digamma((nu + K) / 2) - digamma(nu / 2))
    )
    out = -0.5 * logdet + hv
    return float(out) if np.ndim(out) == 0 else out


def entropy_grad_o(o, K):
    """d/do of the nu-part of the t entropy, nu = o + 2."""
    nu = np.asarray(o, dtype=float) + 2.0
    return K / (2.0 * nu) + 0.25 * (nu + K) * (trigamma((nu + K) / 2) - trigamma(nu / 2))


def surrogate_objective(state: VIState, X, mu_prev, h: Hyperparams, per_row=False, W=None, Lambda_inv=None):
    """Row-wise MM surrogate plus the t entropy; constants are dropped.

    For row j:
        -c_j/2 E||x_j - B_j w||^2 - c_j n/2 E[B_j Phi B_j^T]
        - 1/2 sum_k W_jk E[B_jk^2] - 1/2 ln|Lambda_j| + h(nu_j)
    """
    if W is None:
        W = mm_weights(mu_prev, h)
    n = X.shape[0]
    G = _G(state)
    cov = state.row_cov(Lambda_inv)
    wx = state.w @ X  # K x p
    xx = np.einsum("ij,ij->j", X, X)
    lin = np.einsum("jk,kj->j", state.mu, wx)
    quad = np.einsum("jk,kl,jl->j", state.mu, G, state.mu)
    tr = _trace_with(cov, G)
    fit = -0.5 * state.c * (xx - 2.0 * lin + quad + tr)
    EB2 = state.mu**2 + np.diagonal(cov, axis1=1, axis2=2)
    prior = -0.5 * (W * EB2).sum(axis=1)
    ent = entropy_mvt(state.Lambda, state.nu, state.K)
    rows = fit + prior + ent
    return rows if per_row else float(rows.sum())


def euclidean_grad(state: VIState, X, W):
    """Gradients of the surrogate with respect to mu (p x K) and Lambda (p x K x K)."""
    G = _G(state)
    H = state.c[:, None, None] * G + W[:, :, None] * np.eye(state.K)
    g_mu = state.c[:, None] * (state.w @ X).T - np.einsum("jk,jkl->jl", state.mu, H)
    Linv = np.linalg.inv(state.Lambda)
    kappa = _kappa(state.nu)[:, None, None]
    g_Lam = 0.5 * kappa * (Linv @ H @ Linv) - 0.5 * Linv
    return g_mu, g_Lam


def natgrad_direction(state: VIState, X, W):
    """Natural-gradient direction: (Lambda^-1 g_mu, kappa H - Lambda)."""
    G = _G(state)
    H = state.c[:, None, None] * G + W[:, :, None] * np.eye(state.K)
    g_mu = state.c[:, None] * (state.w @ X).T - np.einsum("jk,jkl->jl", state.mu, H)
    L = spd_factor(state.Lambda)
    d_mu = tri_solve_upper_t(L, tri_solve_lower(L, g_mu))
    d_Lam = _kappa(state.nu)[:, None, None] * H - state.Lambda
    return d_mu, d_Lam


def natgrad_step_mu_lambda(state: VIState, X, rho, W, wx=None):
    """One natural-gradient step on every row; returns new (mu, Lambda).

    Lambda takes its convex-combination step first and the mean step is
    preconditioned by the updated Lambda. Since the new Lambda dominates
    rho * kappa * H, the mean step can never overshoot, however large the
    MM weights are relative to the previous Lambda.
    """
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    G = _G(state)
    if wx is None:
        wx = state.w @ X
    c = state.c
    g_mu = c[:, None] * (wx.T - state.mu @ G) - state.mu * W
    scale = rho * _kappa(state.nu)
    Lam = (1.0 - rho) * state.Lambda + (scale * c)[:, None, None] * G
    Lam[:, np.arange(state.K), np.arange(state.K)] += scale[:, None] * W
    try:
        L = spd_factor(Lam)
    except NotPositiveDefiniteError as exc:
        raise NumericError(f"Lambda of row {exc.batch_index} lost definiteness", index=exc.batch_index) from exc
    mu = state.mu + rho * tri_solve_upper_t(L, tri_solve_lower(L, g_mu))
    return mu, Lam


# ---------------------------------------------------------------- degrees of freedom


def sample_q_z(o, rng, size=None):
    """Draw z whose cubic transform ``T_o(z)`` is Gamma((o + 2)/2, 1).

    Rejection from a standard normal proposal (cubic-transform gamma method
    with ``d = o/2 + 2/3``). ``o`` may be an array; ``size`` prepends draws.
    """
    gen = as_generator(rng)
    o = np.asarray(o, dtype=float)
    if np.any(~(o > 0)):
        raise ValueError("o must be > 0")
    shape = o.shape if size is None else tuple(np.atleast_1d(size)) + o.shape
    d = np.broadcast_to(o / 2.0 + 2.0 / 3.0, shape)
    c = 1.0 / np.sqrt(9.0 * d)
    z = np.empty(shape)
    todo = np.ones(shape, dtype=bool)
    while todo.any():
        m = int(todo.sum())
        cand = gen.standard_normal(m)
        logu = np.log(gen.random(m))
        dd, cc = d[todo], c[todo]
        y = 1.0 + cc * cand
        ok = y > 0
        V = np.where(ok, y, 1.0) ** 3
        accept = ok & (logu < 0.5 * cand**2 + dd - dd * V + dd * np.log(V))
        idx = np.flatnonzero(todo.ravel())[accept]
        z.ravel()[idx] = cand[accept]
        todo.ravel()[idx] = False
    return z


def _transform(o, z):
    """Cubic transform and its o-derivatives at fixed z: (T, dT/do, dlogq/do)."""
    d = o / 2.0 + 2.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    y = 1.0 + c * z
    T = d * y**3
    dy = z * (-c / (4.0 * d))
    dT = 0.5 * y**3 + 3.0 * d * y**2 * dy
    alpha = (o + 2.0) / 2.0
    dlogq = 0.5 * np.log(T) + (alpha - 1.0) * dT / T - dT - 0.5 * digamma(alpha) + 1.0 / (4.0 * d) + 2.0 * dy / y
    return T, dT, dlogq


def _prior_mc_grad(mu, L, W, o, z, eps):
    """Pathwise + score estimate of d/do E[-1/2 sum_k W_k B_k^2] for every row.

    ``z`` is (S, p), ``eps`` is (p, K, S); ``L`` is the lower factor of Lambda.
    """
    T, dT, dlogq = _transform(o[None, :], z)
    alpha = (o + 2.0) / 2.0
    r = np.sqrt(alpha[None, :] / T)
    dr = (0.5 * T - alpha[None, :] * dT) / (2.0 * r * T**2)
    e = tri_solve_upper_t(L, eps)  # covariance Lambda^-1
    B = mu[:, :, None] + r.T[:, None, :] * e
    f = -0.5 * np.einsum("jk,jks->js", W, B * B)
    f0 = -0.5 * (W * mu * mu).sum(axis=1)
    path = -np.einsum("jk,jks->js", W, B * e) * dr.T
    score = (f - f0[:, None]) * dlogq.T
    return (path + score).mean(axis=1)


def grad_o(state: VIState, W, mc_samples, rng, j=None, Lambda_inv=None):
    """Gradient of the objective in o_j = nu_j - 2 (all rows, or row ``j``).

    Closed-form fit and entropy terms plus a Monte Carlo estimate of the
    prior term, using the MM quadratic form of the log-prior with weights W.
    """
    gen = as_generator(rng)
    rows = np.arange(state.p) if j is None else np.atleast_1d(j)
    o = state.o[rows]
    G = _G(state)
    L = spd_factor(state.Lambda[rows])
    if Lambda_inv is None:
        Linv = tri_solve_lower(L, np.broadcast_to(np.eye(state.K), L.shape))
        tr = ((Linv @ G) * Linv).sum(axis=(1, 2))  # tr(Lambda^-1 G)
    else:
        tr = _trace_with(Lambda_inv[rows], G)
    # antithetic pairs (z, eps), (z, -eps) cancel the part of the pathwise
    # term that is linear in eps; an odd sample count keeps one unpaired draw
    half = (mc_samples + 1) // 2
    z = sample_q_z(o, gen, size=half)
    eps = gen.standard_normal((len(rows), state.K, half))
    z = np.concatenate([z, z[: mc_samples - half]])
    eps = np.concatenate([eps, -eps[:, :, : mc_samples - half]], axis=2)
    mc = _prior_mc_grad(state.mu[rows], L, W[rows], o, z, eps)
    g = state.c[rows] / o**2 * tr + mc + entropy_grad_o(o, state.K)
    return float(g[0]) if j is not None and np.ndim(j) == 0 else g


def grad_o_exact(state: VIState, W):
    """Same gradient with the prior term in closed form: sum_k W_k (Lambda^-1)_kk / o^2."""
    o = state.o
    Linv = np.linalg.inv(state.Lambda)
    tr = _trace_with(Linv, _G(state))
    prior = (W * np.diagonal(Linv, axis1=1, axis2=2)).sum(axis=1) / o**2
    return state.c / o**2 * tr + prior + entropy_grad_o(o, state.K)


def mirror_step_o(o, grad, rho):
    """Exponentiated-gradient step ``o * exp(rho * grad)`` with the exponent clamped."""
    o = np.asarray(o, dtype=float)
    if np.any(~(o > 0)):
        raise ValueError("o must be > 0")
    return o * np.exp(np.clip(rho * np.asarray(grad, dtype=float), -EXP_CLAMP, EXP_CLAMP))


# ---------------------------------------------------------------- monitored objective


def collapsed_log_prior(B, h: Hyperparams):
    """log pi(B) with lambda integrated out, up to a constant."""
    p, K = B.shape
    alpha, beta = h.column_shape_rate(K)
    return float(-((alpha + 2 * p) * np.log(beta + np.sqrt(np.abs(B)).sum(axis=0))).sum())


def monitor_objective(state: VIState, X, h: Hyperparams, anchor=None, Lambda_inv=None):
    """ELBO with E[log pi(B)] replaced by its MM minorizer anchored at ``anchor``.

    The minorizer is log pi(B*) - 1/2 sum W (E[B^2] - B*^2). It is a lower
    bound for any anchor whose weights are not floored; the default anchor
    sqrt(E[B^2]) makes it the tightest one.
    """
    floor = MM_FLOOR
    if anchor is None:
        anchor, floor = second_moment_anchor(state, Lambda_inv), _TINY
    n = X.shape[0]
    W = mm_weights(anchor, h, floor)
    rows = surrogate_objective(state, X, anchor, h, per_row=True, W=W, Lambda_inv=Lambda_inv)
    # surrogate rows carry -c/2 E||.||^2 and the B terms; add the rest
    shape, rate = state.sig_shape, state.sig_rate
    elog_s2 = np.log(rate) - digamma(shape)
    sigma_terms = -(0.5 * n + h.a_sigma + 1.0) * elog_s2 - state.c * h.b_sigma
    sigma_ent = shape + np.log(rate) + gammaln(shape) - (1.0 + shape) * digamma(shape)
    _, logdet_phi = np.linalg.slogdet(state.Phi)
    eta_terms = -0.5 * (np.sum(state.w**2) + n * np.trace(state.Phi)) + 0.5 * n * logdet_phi
    bound_const = collapsed_log_prior(anchor, h) + 0.5 * float((W * anchor**2).sum())
    return float(rows.sum() + sigma_terms.sum() + sigma_ent.sum() + eta_terms + bound_const)


# ---------------------------------------------------------------- driver


def init_state(X, h: Hyperparams, cfg: VIConfig) -> VIState:
    """Spectral start.

    mu holds the top right singular vectors of X scaled by s / sqrt(n).
    q(eta) and q(sigma2) are first fitted treating mu as exact, then every
    Lambda_j is set to the fixed point of its own update. Starting from a
    diffuse Lambda instead inflates the row covariances, which shrinks w and
    blows up the scale of mu; that scale then decays only very slowly.
    """
    n, p = X.shape
    K = h.K
    _, s, Vt = np.linalg.svd(X, full_matrices=False)
    r = min(K, s.size)
    mu = np.zeros((p, K))
    mu[:, :r] = Vt[:r].T * (s[:r] / np.sqrt(n))
    state = VIState(
        mu=mu,
        Lambda=np.broadcast_to(np.eye(K), (p, K, K)).copy(),
        nu=np.full(p, cfg.nu_init),
        sig_shape=np.full(p, h.a_sigma + 0.5 * n),
        sig_rate=np.full(p, h.a_sigma + 0.5 * n),
        w=np.zeros((K, n)),
        Phi=np.eye(K),
        c=np.ones(p),
    )
    point_mass = np.zeros((p, K, K))
    state.w, state.Phi = update_q_eta(state, X, point_mass)
    state.sig_shape, state.sig_rate = update_q_sigma(state, X, h, point_mass)
    state.c = state.sig_shape / state.sig_rate
    W = mm_weights(mu, h)
    kappa = _kappa(state.nu)
    Lam = (kappa * state.c)[:, None, None] * _G(state)
    Lam[:, np.arange(K), np.arange(K)] += kappa[:, None] * W
    state.Lambda = Lam
    return state


def outer_step(state: VIState, X, h: Hyperparams, cfg: VIConfig, t: int, rng, Lambda_inv=None, kind="mean"):
    """One outer iteration (in place); ``t`` is the 1-based outer index.

    Returns the MM anchor used for this iteration and the final Lambda^-1 stack.
    """
    rho = cfg.rho(t)
    if Lambda_inv is None:
        Lambda_inv = np.linalg.inv(state.Lambda)
    state.w, state.Phi = update_q_eta(state, X, Lambda_inv)
    state.sig_shape, state.sig_rate = update_q_sigma(state, X, h, Lambda_inv)
    state.c = state.sig_shape / state.sig_rate
    anchor = anchor_for(state, kind, Lambda_inv)
    # second-moment anchors are strictly positive, so they need no cap
    W = mm_weights(anchor, h, MM_FLOOR if kind == "mean" else _TINY)
    wx = state.w @ X
    for _ in range(cfg.T1):
        state.mu, state.Lambda = natgrad_step_mu_lambda(state, X, rho, W, wx)
    Lambda_inv = np.linalg.inv(state.Lambda)
    g = grad_o(state, W, cfg.mc_samples, rng, Lambda_inv=Lambda_inv)
    o = state.o
    for _ in range(cfg.T2):
        o = mirror_step_o(o, g, rho)
    state.nu = o + 2.0
    return anchor, Lambda_inv


def run_vi(d: Dataset, h: Hyperparams, cfg: VIConfig, progress=None) -> VIState:
    """Iterate until the monitored objective's relative change drops below ``tol``.

    The monitored objective is the ELBO lower bound with the minorizer
    touching at sqrt(E[B^2]), the tightest member of the family. Mean
    anchored steps move fast early on but stop raising that bound once the
    noise rows have collapsed. On the first real drop ``"adaptive"``
    rejects the step and continues with second-moment anchors, which ascend
    the bound up to Monte Carlo noise in the degrees-of-freedom step. With
    ``"mean"`` and ``cfg.keep_best`` the drop ends the run and the previous
    iterate is returned. Any other drop counts towards ``cfg.patience``;
    that many consecutive drops raise :class:`VIDivergenceError`.

    ``progress``, if given, is called as ``progress(t, state, objective)``.
    """
    X = np.ascontiguousarray(d.X)
    limits = threadpool_limits(cfg.threads) if cfg.threads else contextlib.nullcontext()
    t0 = time.perf_counter()
    history = []
    converged = False
    stop_reason = "max_outer"
    rejected = []
    switched_at = None
    kind = "second_moment" if cfg.anchor == "second_moment" else "mean"
    with limits:
        state = init_state(X, h, cfg)
        drops = 0
        Lambda_inv = None
        saved = None
        for t in range(1, cfg.max_outer + 1):
            # only mean-anchored steps can be rolled back; second-moment steps
            # ascend the monitored bound, so every drop they make is kept
            rollback = kind == "mean" and (cfg.keep_best or cfg.anchor == "adaptive")
            if rollback:
                saved = _snapshot(state), Lambda_inv
            try:
                _, Lambda_inv = outer_step(state, X, h, cfg, t, RngStream(cfg.seed, (t,)), Lambda_inv, kind)
                obj = monitor_objective(state, X, h, Lambda_inv=Lambda_inv)
            except NumericError as exc:
                raise NumericError(f"outer iteration {t}: {exc}", index=exc.index) from exc
            if cfg.check_invariants:
                state.check()
            if not np.isfinite(obj):
                raise NumericError(f"outer iteration {t}: objective is not finite")
            if history:
                prev = history[-1]
                dropped = obj < prev - cfg.noise_tol * abs(prev)
                if dropped and rollback:
                    _restore(state, saved[0])
                    Lambda_inv = saved[1]
                    rejected.append(obj)
                    if cfg.anchor == "adaptive" and kind == "mean":
                        kind, switched_at = "second_moment", t
                        continue
                    converged, stop_reason = True, "objective_decreased"
                    break
                drops = drops + 1 if dropped else 0
                if drops >= cfg.patience:
                    raise VIDivergenceError(
                        f"objective fell for {drops} consecutive outer iterations "
                        f"(iteration {t}, from {history[-drops]:.6g} to {obj:.6g})"
                    )
            history.append(obj)
            if progress is not None:
                progress(t, state, obj)
            if len(history) >= 2 and abs(obj - prev) <= cfg.tol * abs(prev):
                converged, stop_reason = True, "tolerance"
                break
    state.trace = {
        "objective": history,
        "n_outer": len(history),
        "converged": converged,
        "stop_reason": stop_reason,
        "rejected_objective": rejected,
        "switched_at": switched_at,
        "seconds": time.perf_counter() - t0,
        "config": asdict(cfg),
        "hyperparams": h.to_dict(),
    }
    return state


def _snapshot(state: VIState):
    return {name: np.array(getattr(state, name), copy=True) for name in _ARRAYS + ("c",)}


def _restore(state: VIState, saved):
    for name, val in saved.items():
        setattr(state, name, val)


_ARRAYS = ("mu", "Lambda", "nu", "sig_shape", "sig_rate", "w", "Phi")


def save_state(state: VIState, directory, meta=None):
    """Persist as single-draw BFCH containers plus a manifest."""
    os.makedirs(directory, exist_ok=True)
    for name in _ARRAYS:
        arr = np.asarray(getattr(state, name))
        storage.write(os.path.join(directory, f"{name}.bfch"), arr[None])
    storage.write_manifest(
        os.path.join(directory, "manifest.json"),
        {"kind": "vi", "variables": list(_ARRAYS), "p": state.p, "K": state.K, **state.trace, **(meta or {})},
    )


def load_state(directory) -> VIState:
    man = storage.read_manifest(os.path.join(directory, "manifest.json"))
    if man.get("kind") != "vi":
        raise storage.ContainerError(f"{directory} does not hold a variational state")
    arrays = {name: storage.read(os.path.join(directory, f"{name}.bfch"), mmap=False)[0] for name in _ARRAYS}
    trace = {k: v for k, v in man.items() if k not in {"schema", "kind", "variables", "p", "K"}}
    return VIState(c=arrays["sig_shape"] / arrays["sig_rate"], trace=trace, **arrays)
