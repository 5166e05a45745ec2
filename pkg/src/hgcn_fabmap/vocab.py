"""Vector quantisation, bag-of-words vectors and the word -> location index."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._binio import expect_eof, read_array, read_magic, read_u64, write_array, write_magic, write_u64

VOCAB_MAGIC = b"LVOC1\n"


@dataclass(frozen=True)
class Vocabulary:
    """Codebook of word centroids in the reduced feature space.

    ``source_classes[j]`` is the classifier label that produced word ``j`` when
    empty classes were dropped during centroid extraction.
    """

    centroids: np.ndarray
    source_classes: np.ndarray | None = None

    def __post_init__(self) -> None:
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] == 0:
            raise ValueError("vocabulary needs a non-empty 2-D centroid matrix")
        if not np.isfinite(c).all():
            raise ValueError("centroids must be finite")
        if np.unique(c, axis=0).shape[0] != c.shape[0]:
            raise ValueError("duplicate centroid rows")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def quantize_many(X: np.ndarray, vocab: Vocabulary, block: int = 4096) -> np.ndarray:
    """Nearest-centroid word id for every row; ties go to the smallest id."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != vocab.dim:
        raise ValueError(f"feature dim {X.shape[1]} != vocabulary dim {vocab.dim}")
    out = np.empty(X.shape[0], dtype=np.int64)
    C = vocab.centroids
    for s in range(0, X.shape[0], block):
        diff = X[s:s + block, None, :] - C[None, :, :]
        out[s:s + block] = np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)
    return out


def quantize(x: np.ndarray, vocab: Vocabulary) -> int:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("quantize takes a single feature vector")
    return int(quantize_many(x, vocab)[0])


@dataclass(frozen=True)
class BowVector:
    """Sparse non-negative word weights of one image."""

    weights: Mapping[int, float]
    size: int

    def __post_init__(self) -> None:
        w = {int(q): float(v) for q, v in self.weights.items()}
        for q, v in w.items():
            if not 0 <= q < self.size:
                raise ValueError(f"word id {q} outside vocabulary of size {self.size}")
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"word {q}: weight {v} must be finite and non-negative")
        object.__setattr__(self, "weights", dict(sorted(w.items())))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.size)
        for q, v in self.weights.items():
            out[q] = v
        return out

    @property
    def total(self) -> float:
        return float(sum(self.weights.values()))


@dataclass(frozen=True)
class Observation:
    """Set of words seen in one image (z_q = 1 for listed q)."""

    words: tuple[int, ...]
    size: int

    def __post_init__(self) -> None:
        words = tuple(int(q) for q in self.words)
        if len(set(words)) != len(words):
            raise ValueError("duplicate word ids in observation")
        if any(not 0 <= q < self.size for q in words):
            raise ValueError(f"word id outside vocabulary of size {self.size}")
        object.__setattr__(self, "words", tuple(sorted(words)))

    def __contains__(self, q: int) -> bool:
        i = bisect.bisect_left(self.words, q)
        return i < len(self.words) and self.words[i] == q

    def __len__(self) -> int:
        return len(self.words)

    def to_dense(self) -> np.ndarray:
        z = np.zeros(self.size, dtype=np.int8)
        z[list(self.words)] = 1
        return z

    @classmethod
    def from_dense(cls, z: np.ndarray) -> "Observation":
        z = np.asarray(z)
        return cls(tuple(np.flatnonzero(z).tolist()), z.size)


def bow_histogram(features: np.ndarray, vocab: Vocabulary) -> BowVector:
    features = np.asarray(features, dtype=np.float64)
    if features.size == 0:
        return BowVector({}, vocab.size)
    ids, counts = np.unique(quantize_many(features, vocab), return_counts=True)
    return BowVector(dict(zip(ids.tolist(), counts.astype(float).tolist())), vocab.size)


def tfidf(bows: Sequence[BowVector]) -> list[BowVector]:
    """weight = count / total_count * ln(N / df); absent words stay absent."""
    if not bows:
        raise ValueError("tfidf needs at least one image")
    n = len(bows)
    df: dict[int, int] = {}
    for b in bows:
        for q, v in b.weights.items():
            if v > 0:
                df[q] = df.get(q, 0) + 1
    out = []
    for b in bows:
        total = b.total
        if total == 0:
            out.append(BowVector({}, b.size))
            continue
        out.append(BowVector({q: (v / total) * np.log(n / df[q]) for q, v in b.weights.items() if v > 0}, b.size))
    return out


def binarize(b: BowVector, threshold: float = 0.0) -> Observation:
    return Observation(tuple(q for q, v in b.weights.items() if v > threshold), b.size)


def bow_confusion(bows: Sequence[BowVector]) -> np.ndarray:
    """Cosine similarity matrix of the (L2-normalised) bag-of-words vectors."""
    if not bows:
        raise ValueError("bow_confusion needs at least one image")
    M = np.stack([b.to_dense() for b in bows])
    norms = np.linalg.norm(M, axis=1)
    nz = norms > 0
    M[nz] /= norms[nz, None]
    S = M @ M.T
    S = 0.5 * (S + S.T)
    return np.clip(S, 0.0, 1.0)


@dataclass
class InvertedIndex:
    """postings[q] = strictly increasing ids of locations containing word q."""

    postings: list[list[int]] = field(default_factory=list)

    @classmethod
    def empty(cls, n_words: int) -> "InvertedIndex":
        return cls([[] for _ in range(n_words)])

    @property
    def n_words(self) -> int:
        return len(self.postings)

    def add(self, q: int, location: int) -> None:
        plist = self.postings[q]
        i = bisect.bisect_left(plist, location)
        if i == len(plist) or plist[i] != location:
            plist.insert(i, location)

    def __getitem__(self, q: int) -> list[int]:
        return self.postings[q]

    def locations(self) -> set[int]:
        return {loc for plist in self.postings for loc in plist}


def build_inverted_index(observations_by_location: Sequence[Iterable[int]], n_words: int) -> InvertedIndex:
    """Index from each location's set of present words."""
    index = InvertedIndex.empty(n_words)
    for loc, words in enumerate(observations_by_location):
        ws = words.words if isinstance(words, Observation) else words
        for q in ws:
            index.add(int(q), loc)
    return index


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    with open(path, "wb") as fh:
        write_magic(fh, VOCAB_MAGIC)
        src = vocab.source_classes
        write_u64(fh, vocab.size, vocab.dim, int(src is not None))
        write_array(fh, vocab.centroids, "f8")
        if src is not None:
            write_array(fh, src, "u8")


def load_vocabulary(path: str | Path) -> Vocabulary:
    with open(path, "rb") as fh:
        read_magic(fh, VOCAB_MAGIC, path)
        n, dim, has_src = read_u64(fh, 3, path)
        centroids = read_array(fh, "f8", (n, dim), path)
        src = read_array(fh, "u8", (n,), path).astype(np.int64) if has_src else None
        expect_eof(fh, path)
    return Vocabulary(centroids, src)


def save_bow_csv(bows: Sequence[BowVector], path: str | Path) -> None:
    M = np.stack([b.to_dense() for b in bows]) if bows else np.zeros((0, 0))
    np.savetxt(path, M, delimiter=",", fmt="%.17g")
