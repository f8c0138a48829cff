"""Support selection, covariance estimates, accuracy metrics and ESS."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import stats

from .state import GibbsChain, save_matrix

__all__ = [
    "SelectionError",
    "SelectionReport",
    "select_support_gibbs",
    "select_support_vi",
    "effective_rank",
    "covariance_estimate",
    "sparsity_metrics",
    "frobenius_distance",
    "ess",
    "ess_array",
    "ess_loadings",
    "write_matrix_csv",
    "build_report",
    "write_heatmap_png",
]

MIN_DRAWS = 100
ESS_CAP = 10.0  # ESS is reported as at most ESS_CAP * N


class SelectionError(ValueError):
    pass


@dataclass
class SelectionReport:
    support_mask: np.ndarray
    K_hat: int
    Sigma_hat: np.ndarray
    level: float
    threshold: float
    fdr: float | None = None
    fnr: float | None = None
    frob: float | None = None
    include_diagonal: bool = False

    def to_dict(self, with_mask=True):
        out = {
            "K_hat": int(self.K_hat),
            "level": self.level,
            "threshold": self.threshold,
            "include_diagonal": self.include_diagonal,
            "active_columns": [int(k) for k in np.flatnonzero(self.support_mask.any(axis=0))],
            "support_size": int(self.support_mask.sum()),
        }
        for name in ("fdr", "fnr", "frob"):
            val = getattr(self, name)
            if val is not None:
                out[name] = float(val)
        if with_mask:
            out["support_mask"] = self.support_mask.astype(int).tolist()
        return out

    def write_json(self, path, with_mask=True):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"schema": 1, **self.to_dict(with_mask)}, fh, indent=2)


def _check_level(level):
    if not 0.0 < level < 1.0:
        raise SelectionError(f"level must lie in (0, 1), got {level}")


def select_support_gibbs(chain: GibbsChain, level=0.95, chunk_rows=64):
    """Entries whose equal-tailed credible interval excludes 0."""
    _check_level(level)
    draws = chain.draws_B
    S, p, K = draws.shape
    if S < MIN_DRAWS:
        raise SelectionError(f"need at least {MIN_DRAWS} stored draws, got {S}")
    tail = (1.0 - level) / 2.0
    mask = np.empty((p, K), dtype=bool)
    for r in range(0, p, chunk_rows):
        block = np.asarray(draws[:, r : r + chunk_rows])
        lo, hi = np.quantile(block, [tail, 1.0 - tail], axis=0)
        mask[r : r + chunk_rows] = (lo > 0) | (hi < 0)
    return mask


def _row_cov_diag(Lambda):
    return np.diagonal(np.linalg.inv(Lambda), axis1=-2, axis2=-1)


def select_support_vi(state, level=0.95):
    """Same rule using the univariate-t marginals of the variational rows."""
    _check_level(level)
    scale = np.sqrt(_row_cov_diag(state.Lambda))
    q = stats.t.ppf(1.0 - (1.0 - level) / 2.0, state.nu)[:, None]
    mu = state.mu
    with np.errstate(invalid="ignore"):
        return np.where(scale > 0, np.abs(mu) > q * scale, mu != 0)


def effective_rank(support_mask) -> int:
    return int(np.asarray(support_mask, dtype=bool).any(axis=0).sum())


def covariance_estimate(source, chunk_draws=None):
    """Posterior (or variational) mean of ``B B^T + Omega``."""
    if isinstance(source, GibbsChain):
        draws = source.draws_B
        S, p, K = draws.shape
        if S == 0:
            raise SelectionError("chain has no stored draws")
        step = chunk_draws or max(1, 4_000_000 // max(p * K, 1))
        acc = np.zeros((p, p))
        for s in range(0, S, step):
            block = np.asarray(draws[s : s + step])
            flat = block.transpose(1, 0, 2).reshape(p, -1)
            acc += flat @ flat.T
        Sigma = acc / S
        Sigma[np.diag_indices(p)] += np.asarray(source.draws_sigma2).mean(axis=0)
        return 0.5 * (Sigma + Sigma.T)
    # variational state
    if np.any(source.sig_shape <= 1):
        raise SelectionError("E[sigma2] undefined: inverse-gamma shape must exceed 1")
    mu = source.mu
    Sigma = mu @ mu.T
    nu = source.nu
    tr = _row_cov_diag(source.Lambda).sum(axis=1)
    Sigma[np.diag_indices(mu.shape[0])] += nu / (nu - 2.0) * tr + source.sig_rate / (source.sig_shape - 1.0)
    return Sigma


def _pair_mask(shape, include_diagonal):
    if shape[0] != shape[1]:
        raise ValueError(f"covariance must be square, got {shape}")
    return np.triu(np.ones(shape, dtype=bool), k=0 if include_diagonal else 1)


def sparsity_metrics(Sigma_hat, Sigma_true, threshold=1e-4, include_diagonal=False):
    """FDR and FNR of the declared-nonzero pattern ``|Sigma_hat| >= threshold``.

    Each unordered pair is counted once (upper triangle); the diagonal is
    left out unless ``include_diagonal``.
    """
    Sigma_hat = np.asarray(Sigma_hat)
    Sigma_true = np.asarray(Sigma_true)
    if Sigma_hat.shape != Sigma_true.shape:
        raise ValueError(f"shape mismatch {Sigma_hat.shape} vs {Sigma_true.shape}")
    pairs = _pair_mask(Sigma_hat.shape, include_diagonal)
    declared = (np.abs(Sigma_hat) >= threshold) & pairs
    truth = (Sigma_true != 0) & pairs
    fp = np.count_nonzero(declared & ~truth)
    fn = np.count_nonzero(truth & ~declared)
    return fp / max(np.count_nonzero(declared), 1), fn / max(np.count_nonzero(truth), 1)


def frobenius_distance(Sigma_hat, Sigma_true) -> float:
    Sigma_hat = np.asarray(Sigma_hat)
    Sigma_true = np.asarray(Sigma_true)
    if Sigma_hat.shape != Sigma_true.shape:
        raise ValueError(f"shape mismatch {Sigma_hat.shape} vs {Sigma_true.shape}")
    return float(np.linalg.norm(Sigma_hat - Sigma_true))


def ess_array(draws):
    """ESS of every scalar chain in ``draws`` (axis 0 indexes draws).

    Geyer's initial monotone sequence: autocovariances are summed in
    adjacent pairs while the pair sums stay positive, with the pair sums
    forced non-increasing. Returns ``(ess, degenerate)`` arrays; constant
    chains get ESS = N and ``degenerate = True``.
    """
    x = np.asarray(draws, dtype=float)
    N = x.shape[0]
    if N < MIN_DRAWS:
        raise SelectionError(f"need at least {MIN_DRAWS} draws, got {N}")
    flat = x.reshape(N, -1)
    degenerate = flat.max(axis=0) == flat.min(axis=0)
    flat = flat - flat.mean(axis=0)
    nfft = 1 << (2 * N - 1).bit_length()
    f = np.fft.rfft(flat, n=nfft, axis=0)
    acov = np.fft.irfft(f.real**2 + f.imag**2, n=nfft, axis=0)[:N] / N
    gamma0 = acov[0]
    n_pairs = N // 2
    pairs = acov[0 : 2 * n_pairs : 2] + acov[1 : 2 * n_pairs : 2]
    keep = np.cumprod(pairs > 0, axis=0, dtype=bool)
    mono = np.minimum.accumulate(np.where(keep, pairs, 0.0), axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = -1.0 + 2.0 * mono.sum(axis=0) / gamma0
    tau = np.maximum(tau, 1.0 / ESS_CAP)
    out = np.where(degenerate, float(N), N / np.where(degenerate, 1.0, tau))
    return out.reshape(x.shape[1:]), degenerate.reshape(x.shape[1:])


def ess(draws, full_output=False):
    """ESS of one scalar chain; ``full_output`` also returns the degenerate flag."""
    x = np.asarray(draws, dtype=float)
    if x.ndim != 1:
        raise ValueError("ess expects a 1-D chain; use ess_array for many chains")
    value, flag = ess_array(x)
    value, flag = float(value), bool(flag)
    return (value, flag) if full_output else value


def ess_loadings(chain: GibbsChain, chunk_rows=32):
    """ESS of every loading B_jk (p x K), computed a block of rows at a time."""
    S, p, K = chain.draws_B.shape
    out = np.empty((p, K))
    for r in range(0, p, chunk_rows):
        out[r : r + chunk_rows] = ess_array(np.asarray(chain.draws_B[:, r : r + chunk_rows]))[0]
    return out


def build_report(source, level=0.95, threshold=1e-4, Sigma_true=None, include_diagonal=False) -> SelectionReport:
    if threshold <= 0:
        raise SelectionError("threshold must be > 0")
    if isinstance(source, GibbsChain):
        mask = select_support_gibbs(source, level)
    else:
        mask = select_support_vi(source, level)
    Sigma_hat = covariance_estimate(source)
    rep = SelectionReport(
        support_mask=mask,
        K_hat=effective_rank(mask),
        Sigma_hat=Sigma_hat,
        level=level,
        threshold=threshold,
        include_diagonal=include_diagonal,
    )
    if Sigma_true is not None:
        rep.fdr, rep.fnr = sparsity_metrics(Sigma_hat, Sigma_true, threshold, include_diagonal)
        rep.frob = frobenius_distance(Sigma_hat, Sigma_true)
    return rep


def write_matrix_csv(path, M):
    save_matrix(path, M)


def write_heatmap_png(path, M):
    """Grayscale heatmap, one pixel per entry, linear ramp from min (black) to max (white)."""
    M = np.asarray(M, dtype=float)
    lo, hi = np.nanmin(M), np.nanmax(M)
    span = hi - lo
    scaled = np.zeros(M.shape) if span <= 0 else (M - lo) / span
    Image.fromarray(np.round(255 * scaled).astype(np.uint8)).save(path)
