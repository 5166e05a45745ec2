"""Training, detection and evaluation stages driven by a ``PipelineConfig``."""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import cltree as clt
from . import evaluation as ev
from . import fabmap as fm
from . import hgcn
from .config import PipelineConfig
from .dataio import DescriptorSet, FormatError, load_descriptors, load_ground_truth
from .knngraph import knn_graph
from .preprocess import PcaModel, load_pca, pca_fit, pca_transform, save_pca
from .vocab import (
    Observation,
    Vocabulary,
    bow_confusion,
    bow_histogram,
    load_vocabulary,
    quantize_many,
    save_vocabulary,
    tfidf,
)

log = logging.getLogger(__name__)

PCA_FILE = "pca.bin"
VOCAB_FILE = "vocab.bin"
TREE_FILE = "cltree.bin"
HGCN_FILE = "hgcn.bin"
TRAIN_LOG_FILE = "training_log.csv"
CONFUSION_FILE = "confusion.csv"
DECISIONS_FILE = "decisions.csv"
POSTERIORS_FILE = "posteriors.csv"
MAP_FILE = "map.bin"
PR_FILE = "pr.csv"


class StageError(Exception):
    """A pipeline stage failed; ``exit_code`` 2 marks bad user input, 1 an internal fault."""

    def __init__(self, stage: str, message: str, exit_code: int = 2) -> None:
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = exit_code


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except FileNotFoundError as exc:
        raise StageError(name, f"file not found: {exc.filename}") from exc
    except (OSError, FormatError, ValueError, hgcn.TrainingDiverged) as exc:
        raise StageError(name, str(exc)) from exc
    except Exception as exc:  # noqa: BLE001 - anything else is a bug
        raise StageError(name, f"{type(exc).__name__}: {exc}", exit_code=1) from exc


def input_scale(X: np.ndarray) -> float:
    """Factor bringing the mean row norm to 1, keeping hyperboloid coordinates modest."""
    m = float(np.linalg.norm(X, axis=1).mean()) if X.size else 0.0
    return 1.0 / m if m > 0 else 1.0


def image_observations(ds: DescriptorSet, words: np.ndarray, n_words: int) -> list[Observation]:
    return [Observation(tuple(np.unique(words[s]).tolist()), n_words) for s in ds.image_slices()]


@dataclass(frozen=True)
class TrainArtifacts:
    pca: PcaModel
    vocab: Vocabulary
    tree: clt.ChowLiuTree
    params: hgcn.HgcnParams
    history: list[float]


def run_train(cfg: PipelineConfig) -> TrainArtifacts:
    out = cfg.output_dir
    with stage("load_descriptors"):
        ds = load_descriptors(cfg.path("paths.train"))
    with stage("preprocess"):
        n_comp = min(cfg["pca.n_components"], ds.dim, ds.n_features)
        pca = pca_fit(ds.data, n_comp)
        Y = pca_transform(pca, ds.data)
    with stage("knn_graph"):
        Xs = Y * input_scale(Y)
        graph = knn_graph(Xs, min(cfg["knn.k"], ds.n_features - 1))
    with stage("train_clusters"):
        n_classes = min(cfg["hgcn.classes"], ds.n_features)
        seeds = hgcn.seed_labels(Xs, n_classes, seed=cfg["hgcn.seed"])
        tcfg = hgcn.TrainConfig(cfg["hgcn.lr"], cfg["hgcn.epochs"], cfg["hgcn.weight_decay"], cfg["hgcn.seed"])
        params, history = hgcn.hgcn_train(graph, Xs, seeds, tcfg, hidden=cfg["hgcn.hidden"])
        predicted = hgcn.hgcn_predict(params, graph, Xs)
    with stage("build_vocab"):
        vocab = hgcn.extract_centroids(Y, predicted)
        words = quantize_many(Y, vocab)
        obs = image_observations(ds, words, vocab.size)
    with stage("train_cltree"):
        eps = cfg["cltree.eps"] or None
        tree = clt.build_cltree(obs, vocab.size, eps)
    with stage("write_artifacts"):
        out.mkdir(parents=True, exist_ok=True)
        save_pca(pca, out / PCA_FILE)
        save_vocabulary(vocab, out / VOCAB_FILE)
        clt.save_cltree(tree, out / TREE_FILE)
        hgcn.save_params(params, out / HGCN_FILE)
        hgcn.save_training_log(history, out / TRAIN_LOG_FILE)
    tail = ", ".join(f"{v:.4f}" for v in history[-3:])
    print(f"train: |C|={vocab.size} tree depth={tree.depth()} loss tail=[{tail}]")
    return TrainArtifacts(pca, vocab, tree, params, history)


@dataclass(frozen=True)
class DetectResult:
    confusion: np.ndarray
    new_place: np.ndarray
    decisions: list[fm.Decision]
    place_of_image: np.ndarray


def _load_model(cfg: PipelineConfig) -> tuple[PcaModel, Vocabulary, clt.ChowLiuTree]:
    out = cfg.output_dir
    with stage("load_artifacts"):
        pca = load_pca(out / PCA_FILE)
        vocab = load_vocabulary(out / VOCAB_FILE)
        tree = clt.load_cltree(out / TREE_FILE)
        if vocab.dim != pca.n_components:
            raise ValueError(f"vocabulary dim {vocab.dim} != PCA components {pca.n_components}")
        if tree.n_words != vocab.size:
            raise ValueError(f"tree has {tree.n_words} words, vocabulary {vocab.size}")
    return pca, vocab, tree


def image_confusion(place_posterior: np.ndarray, place_of_image: np.ndarray) -> np.ndarray:
    """Image-by-image confusion from per-image place posteriors.

    Entry (i, j) for j <= i is the posterior of image i on the place image j
    was mapped to. Images later in the sequence (j > i) stay 0, so a revisit
    is scored against its earlier original only.
    """
    n = place_of_image.size
    conf = place_posterior[:, place_of_image] if n else np.zeros((0, 0))
    return np.tril(conf)


def run_detect(cfg: PipelineConfig, method: str = "fabmap") -> DetectResult:
    if method not in ("fabmap", "bow"):
        raise StageError("detect", f"unknown method {method!r}")
    pca, vocab, tree = _load_model(cfg)
    out = cfg.output_dir
    with stage("load_descriptors"):
        ds = load_descriptors(cfg.path("paths.test"))
    with stage("quantize"):
        if ds.dim != pca.dim:
            raise ValueError(f"test descriptors have dim {ds.dim}, model expects {pca.dim}")
        Y = pca_transform(pca, ds.data)
        words = quantize_many(Y, vocab) if ds.n_features else np.zeros(0, dtype=np.int64)
        obs = image_observations(ds, words, vocab.size)

    if method == "bow":
        with stage("bow_confusion"):
            bows = [bow_histogram(Y[s], vocab) for s in ds.image_slices()]
            conf = np.tril(bow_confusion(tfidf(bows))) if bows else np.zeros((0, 0))
            result = DetectResult(conf, np.zeros(len(bows)), [], np.arange(len(bows)))
        with stage("write_outputs"):
            fm.write_confusion_csv(conf, result.new_place, out / CONFUSION_FILE)
        print(f"detect(bow): {len(bows)} images")
        return result

    with stage("fabmap"):
        det = fm.DetectorModel(cfg["detector.p_z_given_e"], cfg["detector.p_z_given_not_e"])
        fcfg = fm.FabmapConfig(cfg["fabmap.match_threshold"], cfg["fabmap.new_place_prior"], cfg["fabmap.motion"], cfg["fabmap.sigma"])
        pmap = fm.PlaceMap(tree, det, fcfg)
        decisions = [pmap.process(Z) for Z in obs]
        place_of = np.array([d.place for d in decisions], dtype=np.int64)
        # rows are scored against the finished map, which then stays frozen
        post, new_mass = fm.confusion_matrix(obs, pmap)
        conf = image_confusion(post, place_of)
    with stage("write_outputs"):
        out.mkdir(parents=True, exist_ok=True)
        fm.write_confusion_csv(conf, new_mass, out / CONFUSION_FILE)
        with open(out / DECISIONS_FILE, "w", encoding="ascii") as fh:
            fh.write("i,decision,place,posterior\n")
            for i, d in enumerate(decisions):
                fh.write(f"{i},{d.kind},{d.place},{d.probability!r}\n")
        n_places = pmap.n_places
        fm.write_confusion_csv(post, new_mass, out / POSTERIORS_FILE)
        fm.save_map(pmap, out / MAP_FILE)
    closures = sum(d.is_loop_closure for d in decisions)
    print(f"detect(fabmap): {len(decisions)} images, {n_places} places, {closures} loop closures")
    return DetectResult(conf, new_mass, decisions, place_of)


def run_eval(cfg: PipelineConfig) -> list[ev.PrPoint]:
    out = cfg.output_dir
    with stage("load_confusion"):
        conf, _ = fm.read_confusion_csv(out / CONFUSION_FILE)
    with stage("load_ground_truth"):
        gt = load_ground_truth(cfg.path("paths.ground_truth"))
    with stage("evaluate"):
        thresholds = sorted(cfg["eval.thresholds"])
        points = ev.pr_sweep(conf, gt, thresholds)
    with stage("write_outputs"):
        ev.write_pr_csv(points, out / PR_FILE)
    best = max((p for p in points if not p.vacuous), key=lambda p: (p.accuracy, p.recall), default=None)
    if best is None:
        print("eval: no detections at any threshold")
    else:
        print(f"eval: best accuracy {best.accuracy:.4f} at recall {best.recall:.4f} (threshold {best.threshold:g})")
    return points
