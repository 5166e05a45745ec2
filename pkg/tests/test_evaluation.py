import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgcn_fabmap import evaluation as ev
from hgcn_fabmap.dataio import GroundTruthMatrix

# three fixed 3x3 cases, counted by hand at threshold 0.5
CASE_TWO_OF_THREE = (
    np.array([[0.9, 0.1, 0.1], [0.1, 0.7, 0.1], [0.3, 0.1, 0.1]]),
    np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0]]),
    dict(tp=2, fp=0, fn=1, recall=2 / 3, accuracy=1.0),
)
CASE_FOUR_DETECTIONS = (
    np.array([[0.9, 0.0, 0.6], [0.0, 0.8, 0.0], [0.2, 0.0, 0.7]]),
    np.array([[1, 0, 0], [0, 1, 0], [1, 0, 1]]),
    dict(tp=3, fp=1, fn=1, recall=0.75, accuracy=0.75),
)
CASE_ON_THRESHOLD = (
    np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]]),
    np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]]),
    dict(tp=0, fp=0, fn=3, recall=0.0, accuracy=1.0),  # strict inequality: nothing detected
)


def count_oracle(conf, gt, t):
    tp = fp = fn = 0
    for i in range(conf.shape[0]):
        for j in range(conf.shape[1]):
            det, true = conf[i, j] > t, gt[i, j] == 1
            tp += det and true
            fp += det and not true
            fn += (not det) and true
    return tp, fp, fn


class TestHandCases:
    @pytest.mark.parametrize("case", [CASE_TWO_OF_THREE, CASE_FOUR_DETECTIONS, CASE_ON_THRESHOLD],
                             ids=["two_of_three", "four_detections", "on_threshold"])
    def test_counts(self, case):
        conf, gt, want = case
        assert ev.recall(conf, GroundTruthMatrix(gt), 0.5) == pytest.approx(want["recall"])
        assert ev.accuracy(conf, gt, 0.5) == pytest.approx(want["accuracy"])
        (p,) = ev.pr_sweep(conf, gt, [0.5])
        assert (p.tp, p.fp, p.fn) == (want["tp"], want["fp"], want["fn"])

    def test_vacuous_flag(self):
        conf, gt, _ = CASE_ON_THRESHOLD
        assert ev.accuracy_flagged(conf, gt, 0.5) == (1.0, True)
        assert ev.accuracy_flagged(conf, gt, 0.4) == (0.75, False)  # 4 detections, 3 true


class TestEdges:
    def test_identity(self):
        gt = np.eye(4, dtype=int)
        for p in ev.pr_sweep(gt.astype(float), gt, [0.0, 0.5, 0.9]):
            assert p.recall == 1.0 and p.accuracy == 1.0

    def test_zero_conf(self):
        assert ev.recall(np.zeros((2, 2)), np.eye(2), 0.5) == 0.0

    def test_zero_one_sweep(self):
        gt = np.eye(3, dtype=int)
        pts = ev.pr_sweep(gt.astype(float), gt, [0.0, 1.0])
        assert [p.recall for p in pts] == [1.0, 0.0]

    def test_errors(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            ev.recall(np.zeros((2, 3)), np.eye(2), 0.5)
        with pytest.raises(ValueError, match="no true pairs"):
            ev.recall(np.zeros((2, 2)), np.zeros((2, 2)), 0.5)
        with pytest.raises(ValueError, match="no thresholds"):
            ev.pr_sweep(np.eye(2), np.eye(2), [])
        with pytest.raises(ValueError, match="sorted"):
            ev.pr_sweep(np.eye(2), np.eye(2), [0.5, 0.1])

    def test_random_instance_matches_oracle(self):
        rng = np.random.default_rng(0)
        conf = rng.random((20, 20))
        gt = (rng.random((20, 20)) < 0.2).astype(int)
        ts = np.linspace(0, 1, 11)
        for p, t in zip(ev.pr_sweep(conf, gt, ts), ts):
            tp, fp, fn = count_oracle(conf, gt, t)
            assert (p.tp, p.fp, p.fn) == (tp, fp, fn)
            assert p.recall == tp / (tp + fn)
            assert p.accuracy == (tp / (tp + fp) if tp + fp else 1.0)

    def test_best_point(self):
        pts = [ev.PrPoint(0.1, 1.0, 0.5, 2, 2, 0), ev.PrPoint(0.5, 0.5, 1.0, 1, 0, 1), ev.PrPoint(0.9, 0.0, 1.0, 0, 0, 2, True)]
        assert ev.best_recall_at_accuracy(pts, 0.9).threshold == 0.5
        assert ev.best_recall_at_accuracy(pts, 1.1) is None

    def test_csv_round_trip(self, tmp_path):
        pts = ev.pr_sweep(np.random.default_rng(1).random((5, 5)), np.eye(5), [0.1, 0.5, 0.99])
        ev.write_pr_csv(pts, tmp_path / "pr.csv")
        assert ev.read_pr_csv(tmp_path / "pr.csv") == pts


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 12))
def test_recall_monotone(seed, n):
    rng = np.random.default_rng(seed)
    conf = rng.random((n, n))
    gt = np.eye(n, dtype=int) | (rng.random((n, n)) < 0.3)
    pts = ev.pr_sweep(conf, gt, np.sort(rng.random(15)))
    recalls = [p.recall for p in pts]
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))
    for p in pts:
        assert 0 <= p.recall <= 1 and 0 <= p.accuracy <= 1
        assert p.tp <= min(int(gt.sum()), p.tp + p.fp)
