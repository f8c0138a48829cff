"""Synthetic data with a known sparse loading matrix.

Example 1 has five overlapping blocks of unit loadings on p = 1956 rows and
unit noise. Example 2 has random sparse U(0, 1) loadings and heterogeneous
noise variances. B0, Omega0 and X each come from their own random stream so
that, e.g., the truth for a given seed does not depend on n.
"""
from __future__ import annotations

import os

import numpy as np

from . import storage
from .dist import RngStream
from .state import Dataset, load_matrix, save_matrix

__all__ = ["EX1_P", "EX1_K", "EX1_N", "example1_loadings", "synth_example1", "synth_example2", "save_truth", "load_truth"]

EX1_N, EX1_K = 100, 5
EX1_BLOCK, EX1_OVERLAP = 500, 136
EX1_STRIDE = EX1_BLOCK - EX1_OVERLAP
EX1_P = (EX1_K - 1) * EX1_STRIDE + EX1_BLOCK  # 1956

EX2_K = 5
_S_LOAD, _S_NOISE, _S_FACTOR, _S_EPS = range(4)


def example1_loadings():
    B0 = np.zeros((EX1_P, EX1_K))
    for k in range(EX1_K):
        B0[k * EX1_STRIDE : k * EX1_STRIDE + EX1_BLOCK, k] = 1.0
    return B0


def _draw(B0, omega, n, stream):
    eta = stream.child(_S_FACTOR).generator().standard_normal((n, B0.shape[1]))
    eps = stream.child(_S_EPS).generator().standard_normal((n, B0.shape[0]))
    return eta @ B0.T + eps * np.sqrt(omega)


def synth_example1(seed, n=EX1_N):
    """Returns ``(Dataset, B0, Sigma0)`` with ``Sigma0 = B0 B0^T + I``."""
    stream = RngStream(seed, (1,))
    B0 = example1_loadings()
    omega = np.ones(EX1_P)
    X = _draw(B0, omega, n, stream)
    return Dataset(X), B0, B0 @ B0.T + np.diag(omega)


def synth_example2(n, p, seed, K0=EX2_K):
    """Returns ``(Dataset, B0, Omega0, Sigma0)``; ``Omega0`` is the length-p diagonal."""
    if n < 1 or p < 1:
        raise ValueError(f"n and p must be >= 1, got n={n}, p={p}")
    stream = RngStream(seed, (2,))
    gen = stream.child(_S_LOAD).generator()
    keep = gen.random((p, K0)) >= 2.0 / 3.0
    B0 = np.where(keep, gen.random((p, K0)), 0.0)
    omega = stream.child(_S_NOISE).generator().uniform(0.1, 1.0, p)
    X = _draw(B0, omega, n, stream)
    return Dataset(X), B0, omega, B0 @ B0.T + np.diag(omega)


def save_truth(directory, d: Dataset, B0, omega, meta=None):
    """Write X.csv, B0.csv and truth.json; Sigma0 is rebuilt from B0 and Omega0."""
    os.makedirs(directory, exist_ok=True)
    save_matrix(os.path.join(directory, "X.csv"), d.X)
    save_matrix(os.path.join(directory, "B0.csv"), B0)
    storage.write_manifest(
        os.path.join(directory, "truth.json"),
        {
            "kind": "truth",
            "n": d.n,
            "p": d.p,
            "K0": int(B0.shape[1]),
            "loadings": "B0.csv",
            "data": "X.csv",
            "omega0": [float(x) for x in omega],
            **(meta or {}),
        },
    )


def load_truth(path):
    """Return ``(B0, Omega0, Sigma0)`` from a truth.json (or its directory)."""
    if os.path.isdir(path):
        path = os.path.join(path, "truth.json")
    man = storage.read_manifest(path)
    if man.get("kind") != "truth":
        raise storage.ContainerError(f"{path} is not a truth manifest")
    B0 = np.array(load_matrix(os.path.join(os.path.dirname(path), man["loadings"])).X)
    omega = np.asarray(man["omega0"], dtype=float)
    return B0, omega, B0 @ B0.T + np.diag(omega)
