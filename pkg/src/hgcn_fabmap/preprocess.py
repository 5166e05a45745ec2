"""PCA reduction of descriptor matrices.

One basis is fit on the training descriptors and reused for the test set so
that vocabulary centroids and test features share a space. Data are centred by
the mean; no variance scaling, no whitening.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binio import expect_eof, read_array, read_magic, read_u64, write_array, write_magic, write_u64

PCA_MAGIC = b"LPCA1\n"
DEFAULT_COMPONENTS = 20


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    rank_deficient: bool = False

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def pca_fit(X: np.ndarray, n_components: int = DEFAULT_COMPONENTS) -> PcaModel:
    """Fit PCA by eigendecomposition of the sample covariance (ddof=1).

    Components are sign-normalised so the largest-magnitude entry of each is
    positive. When the data have fewer informative directions than requested
    the trailing components carry zero variance and ``rank_deficient`` is set.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D matrix")
    n, dim = X.shape
    if n < 2:
        raise ValueError("PCA needs at least two rows")
    if not 0 < n_components <= min(n, dim):
        raise ValueError(f"n_components={n_components} must lie in [1, {min(n, dim)}]")

    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:n_components]
    variances = np.clip(evals[order], 0.0, None)
    components = evecs[:, order].T.copy()

    pivot = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(n_components), pivot])
    components *= signs[:, None]

    tol = max(variances[0], 1.0) * dim * np.finfo(np.float64).eps * 10
    rank_deficient = bool(np.any(variances <= tol))
    return PcaModel(mean=mean, components=components, explained_variance=variances, rank_deficient=rank_deficient)


def pca_transform(model: PcaModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.dim:
        raise ValueError(f"expected {model.dim} columns, got {X.shape[1]}")
    return (X - model.mean) @ model.components.T


def pca_inverse_transform(model: PcaModel, Y: np.ndarray) -> np.ndarray:
    return np.asarray(Y, dtype=np.float64) @ model.components + model.mean


def save_pca(model: PcaModel, path: str | Path) -> None:
    with open(path, "wb") as fh:
        write_magic(fh, PCA_MAGIC)
        write_u64(fh, model.dim, model.n_components, int(model.rank_deficient))
        write_array(fh, model.mean, "f8")
        write_array(fh, model.components, "f8")
        write_array(fh, model.explained_variance, "f8")


def load_pca(path: str | Path) -> PcaModel:
    with open(path, "rb") as fh:
        read_magic(fh, PCA_MAGIC, path)
        dim, k, flag = read_u64(fh, 3, path)
        mean = read_array(fh, "f8", (dim,), path)
        components = read_array(fh, "f8", (k, dim), path)
        variances = read_array(fh, "f8", (k,), path)
        expect_eof(fh, path)
    return PcaModel(mean=mean, components=components, explained_variance=variances, rank_deficient=bool(flag))
