"""Blocked Gibbs sampler for the factor model under the L1/2 prior.

Sweep order: sigma2, then the loading rows, then (eta, lambda, tau2/v).
Every block of every sweep draws from its own random stream keyed by
``(seed, sweep, block)``, so a chain is a deterministic function of its seed.
"""
from __future__ import annotations

import contextlib
import os
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import solve_triangular
from threadpoolctl import threadpool_limits

from . import storage
from .dist import (
    NotPositiveDefiniteError,
    NumericError,
    RngStream,
    as_generator,
    sample_gamma,
    sample_inverse_gamma,
    sample_inverse_gaussian,
    spd_factor,
    tri_solve_lower,
    tri_solve_upper_t,
)
from .prior import Hyperparams
from .state import Dataset, GibbsChain, GibbsState

__all__ = [
    "GibbsConfig",
    "SamplerError",
    "step_sigma",
    "step_B_rows",
    "step_eta",
    "step_lambda",
    "step_tau",
    "init_state",
    "sweep",
    "run_chain",
]

BLOCK_SIGMA, BLOCK_B, BLOCK_ETA, BLOCK_LAMBDA, BLOCK_TAU = range(5)
# keeps reciprocal inverse-Gaussian draws inside the normal float range
_CLIP = (1e-250, 1e250)


class SamplerError(NumericError):
    def __init__(self, message, iteration, index=None):
        super().__init__(message, index=index)
        self.iteration = iteration


@dataclass(frozen=True)
class GibbsConfig:
    n_iter: int = 10000
    n_burn: int = 5000
    thin: int = 1
    seed: int = 0
    threads: int | None = None
    abs_floor: float = 1e-30
    store_all: bool = False
    check_invariants: bool = False

    def __post_init__(self):
        if not 0 <= self.n_burn < self.n_iter:
            raise ValueError("need 0 <= n_burn < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.abs_floor <= 0:
            raise ValueError("abs_floor must be > 0")

    @property
    def n_keep(self) -> int:
        return (self.n_iter - self.n_burn) // self.thin


def step_sigma(X, B, eta, h: Hyperparams, rng):
    n = X.shape[0]
    resid = X - (B @ eta).T
    ssr = np.einsum("ij,ij->j", resid, resid)
    bad = np.flatnonzero(~np.isfinite(ssr))
    if bad.size:
        raise NumericError(f"non-finite residual for row {int(bad[0])}", index=int(bad[0]))
    return sample_inverse_gamma(h.a_sigma + 0.5 * n, h.b_sigma + 0.5 * ssr, rng)


def step_B_rows(X, eta, tau2, sigma2, lam, rng):
    """Draw every loading row from its K-variate Gaussian conditional.

    The row precision ``eta eta^T / s2 + diag(lam^4 / tau2)`` is handled in
    the prior-scaled form ``I + D eta eta^T D / s2`` with ``D = sqrt(tau2) / lam^2``,
    which stays well conditioned when the prior precision is enormous.
    """
    gen = as_generator(rng)
    p, K = tau2.shape
    D = np.sqrt(tau2) / lam**2
    G = eta @ eta.T
    M = (D[:, :, None] * G[None]) * (D / sigma2[:, None])[:, None, :]
    M[:, np.arange(K), np.arange(K)] += 1.0
    try:
        L = spd_factor(M)
    except NotPositiveDefiniteError as exc:
        raise NumericError(f"loading row {exc.batch_index}: {exc}", index=exc.batch_index) from exc
    rhs = D * (X.T @ eta.T) / sigma2[:, None]
    z = gen.standard_normal((p, K))
    return D * tri_solve_upper_t(L, tri_solve_lower(L, rhs) + z)


def step_eta(X, B, sigma2, rng):
    gen = as_generator(rng)
    K = B.shape[1]
    Bs = B / sigma2[:, None]
    P = np.eye(K) + B.T @ Bs
    L = spd_factor(P)
    rhs = Bs.T @ X.T
    z = gen.standard_normal((K, X.shape[0]))
    y = solve_triangular(L, rhs, lower=True, check_finite=False)
    return solve_triangular(L, y + z, lower=True, trans="T", check_finite=False)


def step_lambda(B, h: Hyperparams, rng):
    p, K = B.shape
    shape, rate = h.column_shape_rate(K)
    return sample_gamma(shape + 2 * p, rate + np.sqrt(np.abs(B)).sum(axis=0), rng)


def step_tau(B, lam, abs_floor, rng):
    """Draw ``(v, tau2)`` given loadings; ``|B|`` is floored at ``abs_floor``."""
    gen = as_generator(rng)
    absB = np.maximum(np.abs(B), abs_floor)
    inv_v = sample_inverse_gaussian(1.0 / (2.0 * lam * np.sqrt(absB)), 0.5, gen)
    v = np.clip(1.0 / inv_v, *_CLIP)
    inv_tau2 = sample_inverse_gaussian(1.0 / (lam**2 * v * absB), 1.0 / v**2, gen)
    tau2 = np.clip(1.0 / inv_tau2, *_CLIP)
    return v, tau2


def init_state(X, h: Hyperparams, stream: RngStream, abs_floor=1e-30) -> GibbsState:
    """Overdispersed start: B ~ N(0, 0.25), sigma2 = 1, eta | B, lambda ~ prior."""
    p, K = X.shape[1], h.K
    gen = stream.child(BLOCK_B).generator()
    B = 0.5 * gen.standard_normal((p, K))
    sigma2 = np.ones(p)
    eta = step_eta(X, B, sigma2, stream.child(BLOCK_ETA))
    shape, rate = h.column_shape_rate(K)
    lam = sample_gamma(shape, rate, stream.child(BLOCK_LAMBDA))
    v, tau2 = step_tau(B, lam, abs_floor, stream.child(BLOCK_TAU))
    return GibbsState(B=B, eta=eta, sigma2=sigma2, lam=lam, tau2=tau2, v=v)


def sweep(state: GibbsState, X, h: Hyperparams, stream: RngStream, abs_floor=1e-30) -> GibbsState:
    sigma2 = step_sigma(X, state.B, state.eta, h, stream.child(BLOCK_SIGMA))
    B = step_B_rows(X, state.eta, state.tau2, sigma2, state.lam, stream.child(BLOCK_B))
    eta = step_eta(X, B, sigma2, stream.child(BLOCK_ETA))
    lam = step_lambda(B, h, stream.child(BLOCK_LAMBDA))
    v, tau2 = step_tau(B, lam, abs_floor, stream.child(BLOCK_TAU))
    return GibbsState(B=B, eta=eta, sigma2=sigma2, lam=lam, tau2=tau2, v=v)


def _allocate(out_dir, n_keep, shapes):
    if out_dir is None:
        return {name: np.empty((n_keep,) + shp) for name, shp in shapes.items()}
    os.makedirs(out_dir, exist_ok=True)
    return {name: storage.create(os.path.join(out_dir, f"{name}.bfch"), n_keep, shp) for name, shp in shapes.items()}


def run_chain(d: Dataset, h: Hyperparams, cfg: GibbsConfig, out_dir=None, progress=None) -> GibbsChain:
    """Run ``cfg.n_iter`` sweeps and keep thinned post-burn-in draws.

    With ``out_dir`` the draws are streamed into BFCH files there (memory
    mapped) and a manifest is written, otherwise they are held in memory.
    ``progress``, if given, is called as ``progress(iteration, state)``.
    """
    X = np.ascontiguousarray(d.X)
    n, p = X.shape
    K = h.K
    shapes = {"B": (p, K), "sigma2": (p,), "lambda": (K,)}
    if cfg.store_all:
        shapes.update(eta=(K, n), tau2=(p, K), v=(p, K))
    store = _allocate(out_dir, cfg.n_keep, shapes)
    limits = threadpool_limits(cfg.threads) if cfg.threads else contextlib.nullcontext()
    t0 = time.perf_counter()
    with limits:
        state = init_state(X, h, RngStream(cfg.seed, (0,)), cfg.abs_floor)
        slot = 0
        for it in range(1, cfg.n_iter + 1):
            try:
                state = sweep(state, X, h, RngStream(cfg.seed, (it,)), cfg.abs_floor)
            except NumericError as exc:
                raise SamplerError(f"sweep {it}: {exc}", iteration=it, index=exc.index) from exc
            if cfg.check_invariants:
                state.check()
            if it > cfg.n_burn and (it - cfg.n_burn) % cfg.thin == 0:
                store["B"][slot] = state.B
                store["sigma2"][slot] = state.sigma2
                store["lambda"][slot] = state.lam
                if cfg.store_all:
                    store["eta"][slot] = state.eta
                    store["tau2"][slot] = state.tau2
                    store["v"][slot] = state.v
                slot += 1
            if progress is not None:
                progress(it, state)
    elapsed = time.perf_counter() - t0
    chain = GibbsChain(
        draws_B=store.pop("B"),
        draws_sigma2=store.pop("sigma2"),
        draws_lambda=store.pop("lambda"),
        n_iter=cfg.n_iter,
        n_burn=cfg.n_burn,
        thin=cfg.thin,
        seed=cfg.seed,
        extra=store,
        meta={"config": asdict(cfg), "hyperparams": h.to_dict(), "n": n, "p": p, "seconds": elapsed},
    )
    if out_dir is not None:
        chain.save(out_dir)
    return chain
