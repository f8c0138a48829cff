"""Observation and latent-state containers, CSV ingestion, standardisation."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import storage

__all__ = [
    "IngestionError",
    "StandardizationError",
    "Dataset",
    "GibbsState",
    "GibbsChain",
    "load_matrix",
    "save_matrix",
    "standardize",
    "load_chain",
]


class IngestionError(ValueError):
    """Bad CSV content; ``row`` and ``col`` are 1-based file positions."""

    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class StandardizationError(ValueError):
    def __init__(self, message, column):
        super().__init__(message)
        self.column = column


@dataclass(frozen=True)
class Dataset:
    """n x p observations (rows are observations) plus recorded transforms."""

    X: np.ndarray
    centered: bool = False
    scaled: bool = False
    column_means: np.ndarray | None = None
    column_sds: np.ndarray | None = None

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"X must be a non-empty 2-D matrix, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            bad = np.argwhere(~np.isfinite(X))[0]
            raise ValueError(f"X has a non-finite entry at {tuple(int(i) for i in bad)}")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        p = X.shape[1]
        means = np.zeros(p) if self.column_means is None else np.asarray(self.column_means, float)
        sds = np.ones(p) if self.column_sds is None else np.asarray(self.column_sds, float)
        object.__setattr__(self, "column_means", means)
        object.__setattr__(self, "column_sds", sds)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def _parse_float(text):
    try:
        val = float(text)
    except ValueError:
        return None
    return val if math.isfinite(val) else None


def load_matrix(path, format="csv") -> Dataset:
    """Read a comma-separated numeric matrix; a non-numeric first row is a header."""
    if format != "csv":
        raise ValueError(f"unsupported format {format!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if any(c.strip() for c in r)]
    if not rows:
        raise IngestionError(f"{path}: empty file")
    first_line, first = rows[0]
    if any(_parse_float(c) is None for c in first):
        rows = rows[1:]
        if not rows:
            raise IngestionError(f"{path}: header row but no data", row=first_line)
    width = len(rows[0][1])
    data = np.empty((len(rows), width))
    for r, (line, cells) in enumerate(rows):
        if len(cells) != width:
            raise IngestionError(
                f"{path}: row {line} has {len(cells)} fields, expected {width}", row=line, col=len(cells)
            )
        for c, cell in enumerate(cells):
            val = _parse_float(cell)
            if val is None:
                raise IngestionError(
                    f"{path}: non-numeric cell {cell!r} at row {line}, column {c + 1}", row=line, col=c + 1
                )
            data[r, c] = val
    return Dataset(data)


def save_matrix(path, X, header=None):
    """Write with 17 significant digits so a reload is bit-identical."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header is not None:
            fh.write(",".join(header) + "\n")
        np.savetxt(fh, X, delimiter=",", fmt="%.17g")


def standardize(d: Dataset, center: bool = True, scale: bool = True) -> Dataset:
    """Centre and/or scale columns (sample SD, n - 1 denominator)."""
    X = np.array(d.X)
    means = X.mean(axis=0)
    sds = X.std(axis=0, ddof=1) if d.n > 1 else np.zeros(d.p)
    if scale:
        zero = np.flatnonzero(~(sds > 0))
        if zero.size:
            raise StandardizationError(f"column {int(zero[0])} has zero variance", column=int(zero[0]))
    if center:
        X = X - means
    if scale:
        X = X / sds
    return Dataset(
        X,
        centered=center or d.centered,
        scaled=scale or d.scaled,
        column_means=means if center else np.zeros(d.p),
        column_sds=sds if scale else np.ones(d.p),
    )


@dataclass
class GibbsState:
    """Full latent state; ``eta`` is K x n (factors in rows)."""

    B: np.ndarray
    eta: np.ndarray
    sigma2: np.ndarray
    lam: np.ndarray
    tau2: np.ndarray
    v: np.ndarray

    def check(self):
        for name in ("B", "eta", "sigma2", "lam", "tau2", "v"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise AssertionError(f"{name} has non-finite entries")
        for name in ("sigma2", "lam", "tau2", "v"):
            if not np.all(getattr(self, name) > 0):
                raise AssertionError(f"{name} must be strictly positive")
        p, K = self.B.shape
        assert self.eta.shape[0] == K and self.sigma2.shape == (p,) and self.lam.shape == (K,)
        assert self.tau2.shape == (p, K) and self.v.shape == (p, K)


@dataclass
class GibbsChain:
    """Post-burn-in thinned draws; arrays are (draws, ...) and may be memmaps."""

    draws_B: np.ndarray
    draws_sigma2: np.ndarray
    draws_lambda: np.ndarray
    n_iter: int
    n_burn: int
    thin: int
    seed: int
    extra: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.draws_B.shape[0]

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        arrays = {"B": self.draws_B, "sigma2": self.draws_sigma2, "lambda": self.draws_lambda, **self.extra}
        for name, arr in arrays.items():
            path = os.path.join(directory, f"{name}.bfch")
            if isinstance(arr, np.memmap) and os.path.abspath(arr.filename) == os.path.abspath(path):
                arr.flush()
            else:
                storage.write(path, arr)
        storage.write_manifest(
            os.path.join(directory, "manifest.json"),
            {
                "kind": "gibbs",
                "n_iter": self.n_iter,
                "n_burn": self.n_burn,
                "thin": self.thin,
                "seed": self.seed,
                "n_draws": self.n_draws,
                "variables": sorted(arrays),
                **self.meta,
            },
        )


def load_chain(directory, mmap=True) -> GibbsChain:
    man = storage.read_manifest(os.path.join(directory, "manifest.json"))
    if man.get("kind") != "gibbs":
        raise storage.ContainerError(f"{directory} does not hold a Gibbs chain")
    arrays = {v: storage.read(os.path.join(directory, f"{v}.bfch"), mmap=mmap) for v in man["variables"]}
    meta = {k: v for k, v in man.items() if k not in {"schema", "kind", "n_iter", "n_burn", "thin", "seed", "n_draws", "variables"}}
    return GibbsChain(
        draws_B=arrays.pop("B"),
        draws_sigma2=arrays.pop("sigma2"),
        draws_lambda=arrays.pop("lambda"),
        n_iter=man["n_iter"],
        n_burn=man["n_burn"],
        thin=man["thin"],
        seed=man["seed"],
        extra=arrays,
        meta=meta,
    )
