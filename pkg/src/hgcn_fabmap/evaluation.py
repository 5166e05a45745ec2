"""Recall / accuracy of a thresholded confusion matrix against ground truth.

Accuracy here is the fraction of above-threshold detections that are true
matches (what is elsewhere called precision).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import GroundTruthMatrix


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    recall: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    vacuous: bool = False  # no detections above threshold; accuracy reported as 1.0


def _check(conf, gt) -> tuple[np.ndarray, np.ndarray]:
    conf = np.asarray(conf, dtype=np.float64)
    truth = np.asarray(gt.entries if isinstance(gt, GroundTruthMatrix) else gt)
    if conf.shape != truth.shape:
        raise ValueError(f"shape mismatch: confusion {conf.shape} vs ground truth {truth.shape}")
    return conf, truth == 1


def _counts(conf: np.ndarray, truth: np.ndarray, threshold: float) -> tuple[int, int, int]:
    detected = conf > threshold
    tp = int(np.count_nonzero(detected & truth))
    fp = int(np.count_nonzero(detected & ~truth))
    fn = int(np.count_nonzero(~detected & truth))
    return tp, fp, fn


def recall(conf, gt, threshold: float) -> float:
    conf, truth = _check(conf, gt)
    if not truth.any():
        raise ValueError("ground truth has no true pairs; recall is undefined")
    tp, _, fn = _counts(conf, truth, threshold)
    return tp / (tp + fn)


def accuracy_flagged(conf, gt, threshold: float) -> tuple[float, bool]:
    """(accuracy, vacuous); vacuous is True when nothing exceeds the threshold."""
    conf, truth = _check(conf, gt)
    tp, fp, _ = _counts(conf, truth, threshold)
    if tp + fp == 0:
        return 1.0, True
    return tp / (tp + fp), False


def accuracy(conf, gt, threshold: float) -> float:
    return accuracy_flagged(conf, gt, threshold)[0]


def pr_sweep(conf, gt, thresholds: Sequence[float]) -> list[PrPoint]:
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.size == 0:
        raise ValueError("no thresholds")
    if np.any(np.diff(thresholds) < 0):
        raise ValueError("thresholds must be sorted ascending")
    conf, truth = _check(conf, gt)
    if not truth.any():
        raise ValueError("ground truth has no true pairs; recall is undefined")
    out = []
    for t in thresholds:
        tp, fp, fn = _counts(conf, truth, float(t))
        vacuous = tp + fp == 0
        out.append(PrPoint(float(t), tp / (tp + fn), 1.0 if vacuous else tp / (tp + fp), tp, fp, fn, vacuous))
    return out


def best_recall_at_accuracy(points: Sequence[PrPoint], min_accuracy: float) -> PrPoint | None:
    """Highest-recall non-vacuous point whose accuracy reaches ``min_accuracy``."""
    ok = [p for p in points if not p.vacuous and p.accuracy >= min_accuracy]
    return max(ok, key=lambda p: (p.recall, p.accuracy), default=None)


def write_pr_csv(points: Sequence[PrPoint], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "recall", "accuracy", "tp", "fp", "fn"])
        for p in points:
            w.writerow([repr(p.threshold), repr(p.recall), repr(p.accuracy), p.tp, p.fp, p.fn])


def read_pr_csv(path: str | Path) -> list[PrPoint]:
    with open(path, newline="", encoding="ascii") as fh:
        rows = list(csv.DictReader(fh))
    return [
        PrPoint(float(r["threshold"]), float(r["recall"]), float(r["accuracy"]), int(r["tp"]), int(r["fp"]), int(r["fn"]),
                int(r["tp"]) + int(r["fp"]) == 0)
        for r in rows
    ]
