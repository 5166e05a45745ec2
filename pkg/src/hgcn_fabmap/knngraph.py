"""Exact k-nearest-neighbour graph over reduced descriptors.

Brute force, O(n^2 * d) time; query rows are processed in blocks which can be
spread over a thread pool. Directed kNN lists are symmetrised by edge union.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_K = 9


@dataclass(frozen=True)
class FeatureGraph:
    """Undirected graph in CSR form; neighbour lists are sorted, no self loops.

    ``self_weights`` is only set on graphs returned by ``normalize_adjacency``.
    """

    n_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    self_weights: np.ndarray | None = None

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def neighbor_weights(self, i: int) -> np.ndarray:
        return self.weights[self.indptr[i]:self.indptr[i + 1]]

    @property
    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def n_edges(self) -> int:
        """Undirected edge count."""
        return int(self.indices.size // 2)

    def weight(self, i: int, j: int) -> float:
        if i == j:
            if self.self_weights is None:
                return 0.0
            return float(self.self_weights[i])
        nbrs = self.neighbors(i)
        pos = np.searchsorted(nbrs, j)
        if pos < nbrs.size and nbrs[pos] == j:
            return float(self.neighbor_weights(i)[pos])
        return 0.0

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(rows, cols, weights) for every directed edge, self loops included when weighted."""
        rows = np.repeat(np.arange(self.n_nodes), self.degree)
        cols, w = self.indices, self.weights
        if self.self_weights is not None:
            loop = np.arange(self.n_nodes)
            rows = np.concatenate([rows, loop])
            cols = np.concatenate([cols, loop])
            w = np.concatenate([w, self.self_weights])
        return rows, cols, w


def _knn_block(X: np.ndarray, start: int, stop: int, k: int) -> np.ndarray:
    diff = X[start:stop, None, :] - X[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
    # stable sort keeps the lower index first on ties
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def knn_lists(X: np.ndarray, k: int = DEFAULT_K, block: int = 256, n_jobs: int = 1) -> np.ndarray:
    """Directed kNN lists, shape (n, k), ordered by distance then index."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 0 < k < n:
        raise ValueError(f"k={k} must satisfy 0 < k < n_rows={n}")
    # rows small enough that a (block, n, d) difference tensor stays modest
    block = max(1, min(block, int(2e7 // max(1, n * X.shape[1]))))
    starts = range(0, n, block)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(lambda s: _knn_block(X, s, min(s + block, n), k), starts))
    else:
        parts = [_knn_block(X, s, min(s + block, n), k) for s in starts]
    return np.vstack(parts)


def graph_from_edges(n_nodes: int, rows: np.ndarray, cols: np.ndarray) -> FeatureGraph:
    """Union-symmetrised unweighted graph from directed edges (self loops dropped)."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    keep = rows != cols
    a = np.concatenate([rows[keep], cols[keep]])
    b = np.concatenate([cols[keep], rows[keep]])
    keys = np.unique(a * n_nodes + b)
    src, dst = keys // n_nodes, keys % n_nodes
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    indptr = np.cumsum(indptr)
    return FeatureGraph(n_nodes=n_nodes, indptr=indptr, indices=dst, weights=np.ones(dst.size))


def knn_graph(X: np.ndarray, k: int = DEFAULT_K, metric: str = "euclidean", n_jobs: int = 1) -> FeatureGraph:
    if metric != "euclidean":
        raise ValueError(f"unsupported metric {metric!r}")
    lists = knn_lists(X, k, n_jobs=n_jobs)
    n = lists.shape[0]
    return graph_from_edges(n, np.repeat(np.arange(n), k), lists.ravel())


def normalize_adjacency(g: FeatureGraph) -> FeatureGraph:
    """Symmetric normalisation with self loops: w(i,j) = 1/sqrt(deg_i deg_j), deg = 1 + #neighbours."""
    deg = g.degree.astype(np.float64) + 1.0
    rows = np.repeat(np.arange(g.n_nodes), g.degree)
    weights = 1.0 / np.sqrt(deg[rows] * deg[g.indices])
    return FeatureGraph(
        n_nodes=g.n_nodes, indptr=g.indptr, indices=g.indices, weights=weights, self_weights=1.0 / deg
    )


def permute_graph(g: FeatureGraph, perm: np.ndarray) -> FeatureGraph:
    """Relabel node ``perm[i]`` of ``g`` as node ``i``."""
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    rows = np.repeat(np.arange(g.n_nodes), g.degree)
    out = graph_from_edges(g.n_nodes, inv[rows], inv[g.indices])
    if g.self_weights is not None or not np.all(g.weights == 1.0):
        w = {(int(inv[r]), int(inv[c])): wt for r, c, wt in zip(rows, g.indices, g.weights)}
        out_rows = np.repeat(np.arange(out.n_nodes), out.degree)
        weights = np.array([w[(int(r), int(c))] for r, c in zip(out_rows, out.indices)])
        self_w = None if g.self_weights is None else g.self_weights[perm]
        out = FeatureGraph(out.n_nodes, out.indptr, out.indices, weights, self_w)
    return out


def export_edge_list(g: FeatureGraph, path: str | Path) -> None:
    """Write one ``i j weight`` line per directed edge."""
    rows = np.repeat(np.arange(g.n_nodes), g.degree)
    with open(path, "w", encoding="ascii") as fh:
        for i, j, w in zip(rows, g.indices, g.weights):
            fh.write(f"{i} {j} {float(w)!r}\n")
