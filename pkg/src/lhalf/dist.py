"""Random streams, elementary samplers, special functions and SPD linear algebra.

Every sampler takes either an :class:`RngStream` (materialised fresh, so the
call is a pure function of its arguments) or an already-running
``numpy.random.Generator`` (consumed in place).  Gamma-type distributions are
parameterised by shape and *rate* throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numba
from scipy.linalg import lapack

__all__ = [
    "ParameterDomainError",
    "NumericError",
    "NotPositiveDefiniteError",
    "RngStream",
    "as_generator",
    "sample_gamma",
    "sample_inverse_gamma",
    "sample_inverse_gaussian",
    "digamma",
    "trigamma",
    "spd_factor",
    "spd_solve",
    "tri_solve_lower",
    "tri_solve_upper_t",
]


class ParameterDomainError(ValueError):
    """A distribution or function parameter lies outside its domain."""


class NumericError(ArithmeticError):
    """A numerical routine failed; ``index`` locates the offending item."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NotPositiveDefiniteError(NumericError):
    """Cholesky factorisation hit a non-positive pivot.

    ``batch_index`` is the failing matrix in a stack (None for a single
    matrix); ``pivot`` is the zero-based pivot position.
    """

    def __init__(self, message, pivot, batch_index=None):
        super().__init__(message, index=batch_index if batch_index is not None else pivot)
        self.pivot = pivot
        self.batch_index = batch_index


@dataclass(frozen=True)
class RngStream:
    """A reproducible, independent random stream.

    Streams are Philox (counter-based) generators keyed by ``seed`` and a
    ``stream_id`` spawn key, so distinct ids give statistically independent
    sequences and equal ``(seed, stream_id)`` reproduce bit-for-bit.
    """

    seed: int
    stream_id: int | tuple[int, ...] = 0

    def __post_init__(self):
        key = self.key
        if not 0 <= self.seed < 2**64 or any(not 0 <= k < 2**64 for k in key):
            raise ParameterDomainError("seed and stream ids must be 64-bit unsigned integers")

    @property
    def key(self) -> tuple[int, ...]:
        sid = self.stream_id
        return tuple(int(k) for k in sid) if isinstance(sid, tuple) else (int(sid),)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(int(i) for i in ids))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


_TINY = np.finfo(float).tiny


def _positive(name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ParameterDomainError(f"{name} must be finite and > 0")
    return arr


def sample_gamma(shape, rate, rng, size=None):
    """Draw from the density proportional to ``x**(shape-1) * exp(-rate*x)``."""
    shape = _positive("shape", shape)
    rate = _positive("rate", rate)
    # for tiny shapes a real share of the mass lies below the smallest
    # double; keep such draws at the smallest positive value, not at 0
    return np.maximum(as_generator(rng).gamma(shape, 1.0 / rate, size=size), _TINY)


def sample_inverse_gamma(shape, rate, rng, size=None):
    """Reciprocal of a Gamma(shape, rate) draw."""
    return 1.0 / sample_gamma(shape, rate, rng, size=size)


def sample_inverse_gaussian(mean, shape, rng, size=None):
    """Inverse-Gaussian draws by the Michael-Schucany-Haas root transform.

    Works on the unit-mean variable ``x / mean ~ IG(1, shape / mean)`` and
    takes the small root as the reciprocal of the large one, which keeps the
    transform free of cancellation when ``mean`` is huge relative to ``shape``
    (the regime of tiny loadings in the Gibbs sampler).
    """
    mean = _positive("mean", mean)
    shape = _positive("shape", shape)
    gen = as_generator(rng)
    if size is None:
        size = np.broadcast(mean, shape).shape
    y = gen.standard_normal(size) ** 2
    u = gen.random(size)
    phi = shape / mean
    big = 1.0 + (y + np.sqrt(y * (4.0 * phi + y))) / (2.0 * phi)
    small = 1.0 / big
    w = np.where(u * (1.0 + small) <= 1.0, small, big)
    return mean * w


# Asymptotic series coefficients (Bernoulli numbers) for x >= 6.
_DIGAMMA_C = (1 / 12, -1 / 120, 1 / 252, -1 / 240, 1 / 132, -691 / 32760, 1 / 12)
_TRIGAMMA_C = (1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730, 7 / 6)
_SERIES_START = 6.0


def _shift_up(x):
    x = np.array(x, dtype=float, copy=True)
    if np.any(~(x > 0)):
        raise ParameterDomainError("argument must be > 0")
    return x


def digamma(x):
    """psi(x) for x > 0 via upward recurrence and the asymptotic series."""
    x = _shift_up(x)
    acc = np.zeros_like(x)
    while True:
        low = x < _SERIES_START
        if not low.any():
            break
        acc = np.where(low, acc - 1.0 / np.where(low, x, 1.0), acc)
        x = np.where(low, x + 1.0, x)
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for coef in reversed(_DIGAMMA_C):
        series = (series + coef) * inv2
    out = acc + np.log(x) - 0.5 / x - series
    return out if out.ndim else float(out)


def trigamma(x):
    """psi'(x) for x > 0 via upward recurrence and the asymptotic series."""
    x = _shift_up(x)
    acc = np.zeros_like(x)
    while True:
        low = x < _SERIES_START
        if not low.any():
            break
        xl = np.where(low, x, 1.0)
        acc = np.where(low, acc + 1.0 / (xl * xl), acc)
        x = np.where(low, x + 1.0, x)
    inv = 1.0 / x
    inv2 = inv * inv
    series = np.zeros_like(x)
    for coef in reversed(_TRIGAMMA_C):
        series = (series + coef) * inv2
    out = acc + inv + 0.5 * inv2 + series * inv
    return out if out.ndim else float(out)


def spd_factor(A):
    """Lower Cholesky factor of one SPD matrix or a stack of them.

    Raises :class:`NotPositiveDefiniteError` naming the failing pivot (and the
    failing matrix for stacks).
    """
    A = np.asarray(A, dtype=float)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    stack = A.reshape(-1, A.shape[-2], A.shape[-1])
    for b, mat in enumerate(stack):
        _, info = lapack.dpotrf(mat, lower=1)
        if info > 0:
            if A.ndim == 2:
                batch = None
            elif A.ndim == 3:
                batch = b
            else:
                batch = tuple(int(i) for i in np.unravel_index(b, A.shape[:-2]))
            where = "" if batch is None else f" (matrix {batch})"
            raise NotPositiveDefiniteError(
                f"matrix not positive definite: pivot {info - 1}{where} is <= 0",
                pivot=int(info - 1),
                batch_index=batch,
            )
    # cholesky refused for a reason other than a bad pivot (e.g. NaN input)
    raise NumericError("Cholesky factorisation failed on non-finite input")


@numba.njit(cache=True)
def _fwd_batched(L, B):
    m, k, r = B.shape
    out = np.empty_like(B)
    for b in range(m):
        for c in range(r):
            for i in range(k):
                s = B[b, i, c]
                for t in range(i):
                    s -= L[b, i, t] * out[b, t, c]
                out[b, i, c] = s / L[b, i, i]
    return out


@numba.njit(cache=True)
def _back_t_batched(L, B):
    m, k, r = B.shape
    out = np.empty_like(B)
    for b in range(m):
        for c in range(r):
            for i in range(k - 1, -1, -1):
                s = B[b, i, c]
                for t in range(i + 1, k):
                    s -= L[b, t, i] * out[b, t, c]
                out[b, i, c] = s / L[b, i, i]
    return out


def _as_batch(L, B):
    L = np.ascontiguousarray(L, dtype=float)
    B = np.asarray(B, dtype=float)
    single = L.ndim == 2
    vec = B.ndim == L.ndim - 1
    Lb = L[None] if single else L
    Bb = B[..., None] if vec else B
    Bb = Bb[None] if single else Bb
    return Lb, np.ascontiguousarray(Bb), single, vec


def _restore(X, single, vec):
    X = X[0] if single else X
    return X[..., 0] if vec else X


def tri_solve_lower(L, B):
    """Solve ``L X = B`` for lower-triangular ``L`` (single or stacked)."""
    Lb, Bb, single, vec = _as_batch(L, B)
    return _restore(_fwd_batched(Lb, Bb), single, vec)


def tri_solve_upper_t(L, B):
    """Solve ``L.T X = B`` given lower-triangular ``L`` (single or stacked)."""
    Lb, Bb, single, vec = _as_batch(L, B)
    return _restore(_back_t_batched(Lb, Bb), single, vec)


def spd_solve(A, B):
    """Solve ``A X = B`` for SPD ``A`` through its Cholesky factor."""
    L = spd_factor(A)
    return tri_solve_upper_t(L, tri_solve_lower(L, B))
