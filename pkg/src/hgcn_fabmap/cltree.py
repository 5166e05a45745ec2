"""Chow-Liu tree over binary word occurrences.

Probabilities come from pairwise contingency tables smoothed with a
pseudo-count ``alpha = eps * N`` per cell (``N`` observations), which makes
the marginal of a word the same whichever partner table it is read from:

    P(z_q=1)           = (n_q + 2 alpha) / (N + 4 alpha)
    P(z_q=1 | z_p=1)   = (n_qp + alpha) / (n_p + 2 alpha)
    P(z_q=1 | z_p=0)   = (n_q - n_qp + alpha) / (N - n_p + 2 alpha)

so the law of total probability holds exactly before the final clip into
``[eps, 1 - eps]``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binio import expect_eof, read_array, read_magic, read_u64, write_array, write_magic, write_u64
from .vocab import Observation

CLTREE_MAGIC = b"LCLT1\n"


@dataclass(frozen=True)
class ChowLiuTree:
    """Rooted tree plus three probability rows per word.

    ``parent[root] == root``. ``marginal[q] = P(z_q=1)``,
    ``cond_present[q] = P(z_q=1 | z_parent=1)``,
    ``cond_absent[q] = P(z_q=1 | z_parent=0)``; the conditionals of the root
    repeat its marginal.
    """

    parent: np.ndarray
    marginal: np.ndarray
    cond_present: np.ndarray
    cond_absent: np.ndarray
    eps: float = 0.0

    def __post_init__(self) -> None:
        parent = np.asarray(self.parent, dtype=np.int64)
        n = parent.size
        for name in ("marginal", "cond_present", "cond_absent"):
            row = np.asarray(getattr(self, name), dtype=np.float64)
            if row.shape != (n,):
                raise ValueError(f"{name} must have one entry per word")
            if np.any(row <= 0) or np.any(row >= 1):
                raise ValueError(f"{name} probabilities must lie strictly inside (0, 1)")
            row.setflags(write=False)
            object.__setattr__(self, name, row)
        roots = np.flatnonzero(parent == np.arange(n))
        if n and roots.size != 1:
            raise ValueError(f"expected exactly one root, found {roots.size}")
        if np.any((parent < 0) | (parent >= n)):
            raise ValueError("parent ids out of range")
        parent.setflags(write=False)
        object.__setattr__(self, "parent", parent)
        if n and len(self._bfs_order()) != n:
            raise ValueError("parent array contains a cycle")

    @property
    def n_words(self) -> int:
        return self.parent.size

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parent == np.arange(self.n_words))[0])

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in range(self.n_words)]
        for q, p in enumerate(self.parent):
            if p != q:
                kids[p].append(q)
        return kids

    def _bfs_order(self) -> list[int]:
        kids = self.children()
        root = int(np.flatnonzero(self.parent == np.arange(self.n_words))[0])
        order, queue = [], deque([root])
        while queue:
            q = queue.popleft()
            order.append(q)
            queue.extend(kids[q])
        return order

    def edges(self) -> list[tuple[int, int]]:
        return sorted((min(q, int(p)), max(q, int(p))) for q, p in enumerate(self.parent) if p != q)

    def depth(self) -> int:
        depth = np.zeros(self.n_words, dtype=np.int64)
        for q in self._bfs_order():
            if self.parent[q] != q:
                depth[q] = depth[self.parent[q]] + 1
        return int(depth.max()) if self.n_words else 0

    def as_table(self) -> np.ndarray:
        """4 x |C| table: parent ids, marginal, P(z|parent present), P(z|parent absent)."""
        return np.vstack([self.parent.astype(np.float64), self.marginal, self.cond_present, self.cond_absent])


def _occurrences(obs: Sequence[Observation], n_words: int) -> np.ndarray:
    B = np.zeros((len(obs), n_words), dtype=np.float64)
    for i, o in enumerate(obs):
        B[i, list(o.words)] = 1.0
    return B


def _joint_tables(B: np.ndarray, alpha: float) -> tuple[np.ndarray, ...]:
    """Smoothed joint probabilities P(z_q=a, z_r=b) for all word pairs."""
    N = B.shape[0]
    n1 = B.sum(axis=0)
    n11 = B.T @ B
    n10 = n1[:, None] - n11
    n01 = n1[None, :] - n11
    n00 = N - n11 - n10 - n01
    denom = N + 4.0 * alpha
    return tuple((c + alpha) / denom for c in (n00, n01, n10, n11))


def _mi_from_joint(p00, p01, p10, p11) -> np.ndarray:
    pq1 = p10 + p11
    pr1 = p01 + p11
    pq0, pr0 = 1.0 - pq1, 1.0 - pr1
    mi = np.zeros_like(p00)
    for pab, pa, pb in ((p00, pq0, pr0), (p01, pq0, pr1), (p10, pq1, pr0), (p11, pq1, pr1)):
        with np.errstate(divide="ignore", invalid="ignore"):
            term = pab * np.log(pab / (pa * pb))
        mi += np.where(pab > 0, term, 0.0)
    return np.maximum(mi, 0.0)


def mutual_information_matrix(obs: Sequence[Observation], n_words: int, alpha: float = 0.5) -> np.ndarray:
    B = _occurrences(obs, n_words)
    mi = _mi_from_joint(*_joint_tables(B, alpha))
    np.fill_diagonal(mi, 0.0)
    return 0.5 * (mi + mi.T)


def mutual_information(obs: Sequence[Observation], q: int, r: int, alpha: float = 0.5) -> float:
    """I(z_q; z_r) in nats from the pseudo-count smoothed 2x2 table."""
    if q == r:
        raise ValueError("mutual information needs two distinct words")
    if not obs:
        raise ValueError("need at least one observation")
    n_words = obs[0].size
    B = _occurrences(obs, n_words)[:, [q, r]]
    joint = _joint_tables(B, alpha)
    return float(_mi_from_joint(*(j[0:1, 1:2] for j in joint))[0, 0])


class _DisjointSet:
    def __init__(self, n: int) -> None:
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


def max_spanning_tree(weights: np.ndarray) -> list[tuple[int, int]]:
    """Kruskal on a dense symmetric weight matrix, heaviest edges first.

    Ties are broken by the lexicographic order of (min id, max id).
    """
    n = weights.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    order = np.lexsort((ju, iu, -weights[iu, ju]))
    ds = _DisjointSet(n)
    edges = []
    for e in order:
        a, b = int(iu[e]), int(ju[e])
        if ds.union(a, b):
            edges.append((a, b))
            if len(edges) == n - 1:
                break
    return edges


def _orient(n: int, edges: Sequence[tuple[int, int]], root: int = 0) -> np.ndarray:
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    parent = np.full(n, -1, dtype=np.int64)
    parent[root] = root
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in sorted(adj[u]):
            if parent[v] < 0:
                parent[v] = u
                queue.append(v)
    return parent


def default_eps(n_observations: int) -> float:
    """1 / (2N); with fewer than two observations that would reach 0.5, so 0.25 is used."""
    if n_observations < 2:
        return 0.25
    return 1.0 / (2.0 * n_observations)


def build_cltree(obs: Sequence[Observation], n_words: int, eps: float | None = None) -> ChowLiuTree:
    """Maximum-MI spanning tree rooted at word 0 with smoothed probability rows."""
    if n_words < 1:
        raise ValueError("need at least one word")
    N = len(obs)
    eps = default_eps(N) if eps is None else eps
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 0.5)")
    alpha = eps * max(N, 1)
    B = _occurrences(obs, n_words)

    if n_words == 1:
        parent = np.zeros(1, dtype=np.int64)
    else:
        mi = _mi_from_joint(*_joint_tables(B, alpha))
        mi = 0.5 * (mi + mi.T)
        parent = _orient(n_words, max_spanning_tree(mi), root=0)

    n_q = B.sum(axis=0)
    marginal = (n_q + 2 * alpha) / (N + 4 * alpha)
    p = parent
    n_p = n_q[p]
    n_qp = (B * B[:, p]).sum(axis=0)
    present = (n_qp + alpha) / (n_p + 2 * alpha)
    absent = (n_q - n_qp + alpha) / (N - n_p + 2 * alpha)
    is_root = p == np.arange(n_words)
    present[is_root] = marginal[is_root]
    absent[is_root] = marginal[is_root]

    clip = lambda a: np.clip(a, eps, 1.0 - eps)  # noqa: E731
    return ChowLiuTree(parent, clip(marginal), clip(present), clip(absent), eps=eps)


def tree_weight(tree: ChowLiuTree, mi: np.ndarray) -> float:
    return math.fsum(float(mi[a, b]) for a, b in tree.edges())


def save_cltree(tree: ChowLiuTree, path: str | Path) -> None:
    with open(path, "wb") as fh:
        write_magic(fh, CLTREE_MAGIC)
        write_u64(fh, tree.n_words)
        write_array(fh, tree.parent, "u8")
        write_array(fh, np.vstack([tree.marginal, tree.cond_present, tree.cond_absent]), "f8")
        write_array(fh, np.array([tree.eps]), "f8")


def load_cltree(path: str | Path) -> ChowLiuTree:
    with open(path, "rb") as fh:
        read_magic(fh, CLTREE_MAGIC, path)
        (n,) = read_u64(fh, 1, path)
        parent = read_array(fh, "u8", (n,), path).astype(np.int64)
        rows = read_array(fh, "f8", (3, n), path)
        (eps,) = read_array(fh, "f8", (1,), path)
        expect_eof(fh, path)
    return ChowLiuTree(parent, rows[0], rows[1], rows[2], eps=float(eps))
