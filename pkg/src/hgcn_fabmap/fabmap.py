"""Probabilistic appearance-based loop closure over a Chow-Liu tree.

Each word q of an observation Z falls into one of four cases given its own
state and the state of its tree parent p_q. The per-word likelihood is

    p(z_q | z_p, L) = sum_s p(z_q | e_q = s, z_p) * p(e_q = s | L)

where the detector-and-tree term is

    p(z_q = a | e_q, z_p) = 1 / (1 + alpha / beta)
    alpha = P(z_q = a') * P(z_q = a' | e_q) * P(z_q = a' | z_p)
    beta  = P(z_q = a)  * P(z_q = a  | e_q) * P(z_q = a  | z_p)

with a' the complement of a. The root word has no parent and uses the plain
detector likelihood.

The sparse engine evaluates all places in time proportional to the postings
of the observed words. A place only differs from the "baseline place" on the
words in its postings; the baseline place has, for every word, the existence
probability a fresh place receives when the word is *not* observed. Every
place caches its all-absent log-likelihood (the default). For a query Z only
words whose case is not the all-absent case need an adjustment, and only the
places listing those words deviate from the baseline adjustment, which is
shared by all places and computed once.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binio import expect_eof, read_array, read_magic, read_u64, write_array, write_magic, write_u64
from .cltree import ChowLiuTree
from .vocab import InvertedIndex, Observation

MAP_MAGIC = b"LMAP1\n"
DEFAULT_MATCH_THRESHOLD = 0.999
DEFAULT_NEW_PLACE_PRIOR = 0.1
_DETECTOR_FLOOR = 1e-6


class CaseId(enum.IntEnum):
    """(z_q, z_parent) combinations."""

    C1 = 1  # word present, parent present
    C2 = 2  # word present, parent absent
    C3 = 3  # word absent, parent present
    C4 = 4  # word absent, parent absent

    @property
    def states(self) -> tuple[int, int]:
        return {1: (1, 1), 2: (1, 0), 3: (0, 1), 4: (0, 0)}[int(self)]

    @classmethod
    def of(cls, z: int, zp: int) -> "CaseId":
        return {(1, 1): cls.C1, (1, 0): cls.C2, (0, 1): cls.C3, (0, 0): cls.C4}[(int(z), int(zp))]


@dataclass(frozen=True)
class DetectorModel:
    """P(z=1 | e=1) and P(z=1 | e=0) of the word detector."""

    p_z_given_e: float = 0.39
    p_z_given_not_e: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.p_z_given_e < 1:
            raise ValueError("p_z_given_e must lie in (0, 1)")
        if not 0 <= self.p_z_given_not_e < 1:
            raise ValueError("p_z_given_not_e must lie in [0, 1)")
        if self.p_z_given_e <= self.p_z_given_not_e:
            raise ValueError("detector must be informative: p_z_given_e > p_z_given_not_e")

    def rates(self, floor: float = _DETECTOR_FLOOR) -> tuple[float, float]:
        """(P(z=1|e=1), P(z=1|e=0)) with the false-positive rate floored away from zero."""
        return self.p_z_given_e, max(self.p_z_given_not_e, floor)


# ---------------------------------------------------------------------------
# per-word terms, vectorised over words


def _detector_given_parent(tree: ChowLiuTree, det: DetectorModel, z, zp, e) -> np.ndarray:
    """p(z_q = z | e_q = e, z_p = zp) for every word; z, zp, e broadcast."""
    pe1, pe0 = det.rates()
    p_z1_e = np.where(e == 1, pe1, pe0)
    p_z1_prior = tree.marginal
    p_z1_parent = np.where(zp == 1, tree.cond_present, tree.cond_absent)

    def prob(a, p):
        return np.where(a == 1, p, 1.0 - p)

    alpha = prob(1 - z, p_z1_prior) * prob(1 - z, p_z1_e) * prob(1 - z, p_z1_parent)
    beta = prob(z, p_z1_prior) * prob(z, p_z1_e) * prob(z, p_z1_parent)
    out = beta / (alpha + beta)
    # the root has no parent: plain detector likelihood
    root = tree.parent == np.arange(tree.n_words)
    return np.where(root, prob(z, p_z1_e), out)


def word_likelihood(tree: ChowLiuTree, det: DetectorModel, z, zp, exist) -> np.ndarray:
    """p(z_q | z_p, L) for every word given states z, zp and P(e_q=1 | L)."""
    z = np.broadcast_to(np.asarray(z), (tree.n_words,))
    zp = np.broadcast_to(np.asarray(zp), (tree.n_words,))
    exist = np.asarray(exist, dtype=np.float64)
    on = _detector_given_parent(tree, det, z, zp, 1)
    off = _detector_given_parent(tree, det, z, zp, 0)
    return on * exist + off * (1.0 - exist)


def case_loglik(tree: ChowLiuTree, det: DetectorModel, case: CaseId, exist) -> np.ndarray:
    """Per-word log-likelihood of ``case`` at existence probabilities ``exist``."""
    z, zp = case.states
    return np.log(word_likelihood(tree, det, z, zp, exist))


def default_increment_d1(tree: ChowLiuTree, det: DetectorModel, q: int | None = None, exist=None) -> np.ndarray | float:
    """All-absent (C4) log term of word q, or of every word when q is None.

    ``exist`` defaults to the baseline existence probabilities.
    """
    if exist is None:
        exist = baseline_exist(tree, det)
    d1 = case_loglik(tree, det, CaseId.C4, np.broadcast_to(exist, (tree.n_words,)))
    return d1 if q is None else float(d1[q])


def case_increments(tree: ChowLiuTree, det: DetectorModel, q: int | None = None, exist=None):
    """Net adjustments (d2, d3, d4) for cases C3, C2, C1 on top of d1.

    Each is ``log p(case) - log p(C4)`` computed as the log of a single ratio,
    so ``d1 + d_c`` reproduces the case log term to rounding.
    """
    if exist is None:
        exist = baseline_exist(tree, det)
    exist = np.broadcast_to(np.asarray(exist, dtype=np.float64), (tree.n_words,))
    base = word_likelihood(tree, det, 0, 0, exist)
    out = tuple(np.log(word_likelihood(tree, det, *c.states, exist) / base) for c in (CaseId.C3, CaseId.C2, CaseId.C1))
    if q is None:
        return out
    return tuple(float(d[q]) for d in out)


def exist_posterior(tree: ChowLiuTree, det: DetectorModel, z, prior) -> np.ndarray:
    """P(e_q=1 | z_q) by Bayes with the detector, clipped to [eps, 1-eps]."""
    pe1, pe0 = det.rates()
    prior = np.asarray(prior, dtype=np.float64)
    z = np.asarray(z)
    like1 = np.where(z == 1, pe1, 1.0 - pe1)
    like0 = np.where(z == 1, pe0, 1.0 - pe0)
    post = like1 * prior / (like1 * prior + like0 * (1.0 - prior))
    eps = tree.eps if tree.eps > 0 else _DETECTOR_FLOOR
    return np.clip(post, eps, 1.0 - eps)


def baseline_exist(tree: ChowLiuTree, det: DetectorModel) -> np.ndarray:
    """Existence probabilities of a fresh place for words it did not observe."""
    return exist_posterior(tree, det, np.zeros(tree.n_words, dtype=np.int8), tree.marginal)


def observed_exist(tree: ChowLiuTree, det: DetectorModel) -> np.ndarray:
    return exist_posterior(tree, det, np.ones(tree.n_words, dtype=np.int8), tree.marginal)


# ---------------------------------------------------------------------------
# places and the dense engine


@dataclass
class PlaceModel:
    exist_prob: np.ndarray
    default_loglik: float = 0.0

    def __post_init__(self) -> None:
        self.exist_prob = np.asarray(self.exist_prob, dtype=np.float64)
        if np.any(self.exist_prob < 0) or np.any(self.exist_prob > 1):
            raise ValueError("existence probabilities must lie in [0, 1]")


def case_states(Z: Observation, tree: ChowLiuTree) -> tuple[np.ndarray, np.ndarray]:
    """(z, z_parent) arrays; the root's parent state mirrors its own."""
    z = Z.to_dense()
    return z, z[tree.parent]


def observation_loglik_dense(Z: Observation, place: PlaceModel, tree: ChowLiuTree, det: DetectorModel) -> float:
    """Sum over all words of ln p(z_q | z_p, L) for a single place."""
    if Z.size != tree.n_words or place.exist_prob.size != tree.n_words:
        raise ValueError("observation, place and tree sizes differ")
    z, zp = case_states(Z, tree)
    return math.fsum(np.log(word_likelihood(tree, det, z, zp, place.exist_prob)).tolist())


def average_place(tree: ChowLiuTree) -> PlaceModel:
    return PlaceModel(np.array(tree.marginal, dtype=np.float64))


def average_place_loglik(Z: Observation, tree: ChowLiuTree, det: DetectorModel) -> float:
    """Mean-field likelihood of an unmapped place whose existence rates are the marginals."""
    return observation_loglik_dense(Z, average_place(tree), tree, det)


# ---------------------------------------------------------------------------
# inference helpers


def posterior_update(logliks: np.ndarray, avg_loglik: float, prior: np.ndarray) -> np.ndarray:
    """Normalised posterior over mapped places plus the trailing new-place slot."""
    logliks = np.asarray(logliks, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if prior.shape != (logliks.size + 1,):
        raise ValueError(f"prior needs {logliks.size + 1} entries (places + new place), got {prior.shape}")
    if np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
        raise ValueError("prior must be a probability vector")
    with np.errstate(divide="ignore"):
        log_terms = np.append(logliks, avg_loglik) + np.log(prior)
    top = np.max(log_terms)
    if not np.isfinite(top):
        raise ValueError("degenerate likelihoods")
    w = np.exp(log_terms - top)
    return w / w.sum()


def motion_prior(
    prev_posterior: np.ndarray,
    model: str = "uniform",
    sigma: float = 0.0,
    new_place_prior: float = DEFAULT_NEW_PLACE_PRIOR,
) -> np.ndarray:
    """Predicted prior over the current places followed by the new-place slot.

    ``prev_posterior`` is the belief over mapped places (sums to 1). The
    neighbour model moves mass ``sigma`` to each adjacent place id and
    reflects the mass that would fall off either end of the sequence.
    """
    prev = np.asarray(prev_posterior, dtype=np.float64)
    if not 0 <= new_place_prior <= 1:
        raise ValueError("new_place_prior must lie in [0, 1]")
    n = prev.size
    if n == 0:
        return np.ones(1)
    if model == "uniform":
        spread = np.full(n, 1.0 / n)
    elif model == "neighbor":
        if not 0 <= sigma <= 0.5:
            raise ValueError(f"neighbour spread sigma={sigma} must lie in [0, 0.5]")
        spread = (1.0 - 2.0 * sigma) * prev
        if n == 1:
            spread = prev.copy()
        else:
            left, right = sigma * prev, sigma * prev
            spread[:-1] += left[1:]
            spread[0] += left[0]  # reflected at the start
            spread[1:] += right[:-1]
            spread[-1] += right[-1]  # reflected at the end
        total = spread.sum()
        spread = spread / total if total > 0 else np.full(n, 1.0 / n)
    else:
        raise ValueError(f"unknown motion model {model!r}")
    return np.append((1.0 - new_place_prior) * spread, new_place_prior)


# ---------------------------------------------------------------------------
# the map and the sparse engine


@dataclass(frozen=True)
class Decision:
    kind: str  # "loop_closure" or "new_place"
    place: int
    probability: float
    posterior: np.ndarray = field(repr=False)

    @property
    def is_loop_closure(self) -> bool:
        return self.kind == "loop_closure"


@dataclass(frozen=True)
class FabmapConfig:
    match_threshold: float = DEFAULT_MATCH_THRESHOLD
    new_place_prior: float = DEFAULT_NEW_PLACE_PRIOR
    motion: str = "uniform"
    sigma: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.match_threshold < 1:
            raise ValueError("match_threshold must lie in (0, 1)")
        if not 0 < self.new_place_prior < 1:
            raise ValueError("new_place_prior must lie in (0, 1)")
        if self.motion not in ("uniform", "neighbor"):
            raise ValueError(f"unknown motion model {self.motion!r}")
        if not 0 <= self.sigma <= 0.5:
            raise ValueError("sigma must lie in [0, 0.5]")


class PlaceMap:
    """Mapped places, their inverted index and the running belief."""

    def __init__(self, tree: ChowLiuTree, det: DetectorModel | None = None, cfg: FabmapConfig | None = None) -> None:
        self.tree = tree
        self.det = det or DetectorModel()
        self.cfg = cfg or FabmapConfig()
        self.places: list[PlaceModel] = []
        self.index = InvertedIndex.empty(tree.n_words)
        self.belief = np.zeros(0)
        self.touches = 0
        self._lo = baseline_exist(tree, self.det)
        self._d1_lo = case_loglik(tree, self.det, CaseId.C4, self._lo)
        self._d1_lo_total = math.fsum(self._d1_lo.tolist())
        self._inc_lo = dict(zip((CaseId.C3, CaseId.C2, CaseId.C1), case_increments(tree, self.det, exist=self._lo)))
        self._children = tree.children()
        self._root = tree.root

    @property
    def n_places(self) -> int:
        return len(self.places)

    @property
    def baseline(self) -> np.ndarray:
        return self._lo

    def prior(self) -> np.ndarray:
        return motion_prior(self.belief, self.cfg.motion, self.cfg.sigma, self.cfg.new_place_prior)

    def postings_of(self, i: int) -> np.ndarray:
        """Words on which place i deviates from the baseline place."""
        return np.flatnonzero(self.places[i].exist_prob != self._lo)

    def _cache_default(self, i: int) -> None:
        place = self.places[i]
        words = self.postings_of(i)
        d1_own = case_loglik(self.tree, self.det, CaseId.C4, place.exist_prob)[words]
        # defaults of the posting words plus the baseline default everywhere else
        place.default_loglik = math.fsum(d1_own.tolist()) + (self._d1_lo_total - math.fsum(self._d1_lo[words].tolist()))

    def add_place(self, exist_prob: np.ndarray) -> int:
        exist = np.clip(np.asarray(exist_prob, dtype=np.float64), self.tree.eps, 1.0 - self.tree.eps)
        if exist.shape != (self.tree.n_words,):
            raise ValueError("place model must have one probability per word")
        self.places.append(PlaceModel(exist))
        i = self.n_places - 1
        for q in self.postings_of(i):
            self.index.add(int(q), i)
        self._cache_default(i)
        return i

    def add_observation_as_place(self, Z: Observation) -> int:
        return self.add_place(exist_posterior(self.tree, self.det, Z.to_dense(), self.tree.marginal))

    def update_place(self, i: int, Z: Observation) -> None:
        """Bayes update of the existence rates of the words seen at place i."""
        place = self.places[i]
        words = list(Z.words)
        if not words:
            return
        z = np.ones(len(words), dtype=np.int8)
        place.exist_prob[words] = exist_posterior(self.tree, self.det, z, place.exist_prob[words])
        for q in words:
            if place.exist_prob[q] != self._lo[q]:
                self.index.add(q, i)
        self._cache_default(i)

    def _adjusted_words(self, Z: Observation) -> list[tuple[int, CaseId]]:
        inz = set(Z.words)
        out = []
        for q in Z.words:
            p = int(self.tree.parent[q])
            out.append((q, CaseId.C1 if (p in inz or q == self._root) else CaseId.C2))
            for c in self._children[q]:
                if c not in inz:
                    out.append((c, CaseId.C3))
        return out

    def loglik_sparse(self, Z: Observation) -> np.ndarray:
        """Per-place log-likelihood of Z touching only the postings of adjusted words."""
        if Z.size != self.tree.n_words:
            raise ValueError("observation size differs from vocabulary size")
        n = self.n_places
        out = np.array([p.default_loglik for p in self.places], dtype=np.float64)
        if n == 0:
            return out
        adjusted = self._adjusted_words(Z)
        if not adjusted:
            return out
        shared = math.fsum(float(self._inc_lo[c][q]) for q, c in adjusted)
        touched = 0
        for q, c in adjusted:
            plist = self.index[q]
            if not plist:
                continue
            ids = np.asarray(plist, dtype=np.int64)
            exist = np.array([self.places[i].exist_prob[q] for i in ids])
            inc = self._case_increment_at(q, c, exist)
            out[ids] += inc - self._inc_lo[c][q]
            touched += ids.size
        self.touches += touched
        return out + shared

    def _case_increment_at(self, q: int, case: CaseId, exist: np.ndarray) -> np.ndarray:
        z, zp = case.states
        pe1, pe0 = self.det.rates()
        t = self.tree
        if q == self._root:
            on_z, on_base = (pe1 if z else 1 - pe1), 1 - pe1
            off_z, off_base = (pe0 if z else 1 - pe0), 1 - pe0
        else:
            def cond(a, b, e):
                pz1e = pe1 if e else pe0
                pz1p = t.cond_present[q] if b else t.cond_absent[q]
                f = lambda s, pr: pr if s else 1 - pr  # noqa: E731
                beta = f(a, t.marginal[q]) * f(a, pz1e) * f(a, pz1p)
                alpha = f(1 - a, t.marginal[q]) * f(1 - a, pz1e) * f(1 - a, pz1p)
                return beta / (alpha + beta)

            on_z, off_z = cond(z, zp, 1), cond(z, zp, 0)
            on_base, off_base = cond(0, 0, 1), cond(0, 0, 0)
        return np.log((on_z * exist + off_z * (1 - exist)) / (on_base * exist + off_base * (1 - exist)))

    def loglik_dense(self, Z: Observation) -> np.ndarray:
        return np.array([observation_loglik_dense(Z, p, self.tree, self.det) for p in self.places])

    def posterior(self, Z: Observation, prior: np.ndarray | None = None) -> np.ndarray:
        prior = self.prior() if prior is None else prior
        return posterior_update(self.loglik_sparse(Z), average_place_loglik(Z, self.tree, self.det), prior)

    def process(self, Z: Observation) -> Decision:
        post = self.posterior(Z)
        n = self.n_places
        if n and post[:n].max() > self.cfg.match_threshold:
            place = int(np.argmax(post[:n]))
            self.update_place(place, Z)
            mapped = post[:n]
            self.belief = mapped / mapped.sum()
            return Decision("loop_closure", place, float(post[place]), post)
        place = self.add_observation_as_place(Z)
        # the new-place mass becomes the belief in the place just created
        self.belief = post.copy()
        return Decision("new_place", place, float(post[n]), post)


def default_loglik_init(pmap: PlaceMap) -> PlaceMap:
    """(Re)compute the cached all-absent log-likelihood of every place."""
    for i in range(pmap.n_places):
        pmap._cache_default(i)
    return pmap


def observation_loglik_sparse(Z: Observation, pmap: PlaceMap) -> np.ndarray:
    return pmap.loglik_sparse(Z)


def process_observation(pmap: PlaceMap, Z: Observation) -> tuple[Decision, PlaceMap]:
    return pmap.process(Z), pmap


def confusion_matrix(test_obs: Sequence[Observation], pmap: PlaceMap) -> tuple[np.ndarray, np.ndarray]:
    """Posterior of each observation against a frozen map under the uniform prior.

    Returns (n_obs x n_places matrix, new-place mass per observation).
    """
    prior = motion_prior(np.full(pmap.n_places, 1.0 / max(pmap.n_places, 1)), "uniform", 0.0, pmap.cfg.new_place_prior)
    if pmap.n_places == 0:
        prior = np.ones(1)
    rows = [pmap.posterior(Z, prior) for Z in test_obs]
    if not rows:
        return np.zeros((0, pmap.n_places)), np.zeros(0)
    M = np.vstack(rows)
    return M[:, :-1], M[:, -1]


# ---------------------------------------------------------------------------
# persistence


def save_map(pmap: PlaceMap, path: str | Path) -> None:
    with open(path, "wb") as fh:
        write_magic(fh, MAP_MAGIC)
        write_u64(fh, pmap.n_places, pmap.tree.n_words)
        if pmap.n_places:
            write_array(fh, np.vstack([p.exist_prob for p in pmap.places]), "f8")
            write_array(fh, pmap.belief, "f8")


def load_map(path: str | Path, tree: ChowLiuTree, det: DetectorModel | None = None, cfg: FabmapConfig | None = None) -> PlaceMap:
    with open(path, "rb") as fh:
        read_magic(fh, MAP_MAGIC, path)
        n, n_words = read_u64(fh, 2, path)
        if n_words != tree.n_words:
            raise ValueError(f"{path}: map has {n_words} words, tree has {tree.n_words}")
        exist = read_array(fh, "f8", (n, n_words), path) if n else np.zeros((0, n_words))
        belief = read_array(fh, "f8", (n,), path) if n else np.zeros(0)
        expect_eof(fh, path)
    pmap = PlaceMap(tree, det, cfg)
    for row in exist:
        pmap.add_place(row)
    pmap.belief = belief
    return pmap


def write_confusion_csv(conf: np.ndarray, new_place: np.ndarray, path: str | Path) -> None:
    """Row-major CSV; the last column of every row holds the new-place mass."""
    conf = np.atleast_2d(np.asarray(conf, dtype=np.float64))
    new_place = np.asarray(new_place, dtype=np.float64)
    R, C = conf.shape
    if new_place.shape != (R,):
        raise ValueError("need one new-place value per confusion row")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# n_rows={R} n_cols={C} new_place_col=1\n")
        for row, extra in zip(conf, new_place):
            fh.write(",".join(repr(float(v)) for v in (*row, extra)) + "\n")


def read_confusion_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, encoding="ascii") as fh:
        header = fh.readline().strip()
        fields = dict(tok.split("=", 1) for tok in header.lstrip("#").split())
        try:
            R, C, extra = int(fields["n_rows"]), int(fields["n_cols"]), int(fields["new_place_col"])
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}: malformed confusion header {header!r}") from exc
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            vals = [float(v) for v in line.split(",")]
            if len(vals) != C + extra:
                raise ValueError(f"{path}: line {lineno}: expected {C + extra} values, got {len(vals)}")
            rows.append(vals)
    if len(rows) != R:
        raise ValueError(f"{path}: header declares {R} rows, found {len(rows)}")
    M = np.array(rows, dtype=np.float64).reshape(R, C + extra)
    if extra:
        return M[:, :C], M[:, C]
    return M, np.zeros(R)
