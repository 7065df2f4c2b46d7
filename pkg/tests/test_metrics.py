import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kilnseg.errors import ConfigError, ShapeError
from kilnseg.metrics import (
    ConfusionMatrix,
    MonitorConfig,
    RunningVariance,
    confusion_matrix,
    evaluate_masks,
    iou_class,
    mean_iou,
    pixel_accuracy,
    running_variance,
    slag_fraction,
)


def brute_iou(pred, truth, c):
    a = {(i, j) for i, j in zip(*np.nonzero(pred == c))}
    b = {(i, j) for i, j in zip(*np.nonzero(truth == c))}
    if not a | b:
        return 1.0
    return len(a & b) / len(a | b)


def two_pass_var(xs):
    m = sum(xs) / len(xs)
    return sum((x - m) ** 2 for x in xs) / len(xs)


def test_identical_masks_diagonal():
    m = np.random.default_rng(0).integers(0, 4, size=(6, 6))
    cm = confusion_matrix(m, m)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    assert pixel_accuracy(cm) == 1.0 and mean_iou(cm) == 1.0


def test_confusion_hand_count():
    cm = confusion_matrix(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]))
    assert cm.counts[1, 0] == 1 and cm.counts[0, 0] == 1 and cm.counts[1, 1] == 2
    assert cm.total == 4
    assert pixel_accuracy(cm) == 0.75


def test_confusion_shape_mismatch():
    with pytest.raises(ShapeError):
        confusion_matrix(np.zeros((2, 2), int), np.zeros((2, 3), int))


def test_binary_reduction_of_accuracy():
    rng = np.random.default_rng(4)
    p, t = rng.integers(0, 2, size=(8, 8)), rng.integers(0, 2, size=(8, 8))
    cm = confusion_matrix(p, t, 2)
    c = 1
    acc = (cm.tp(c) + cm.tn(c)) / (cm.tp(c) + cm.fp(c) + cm.tn(c) + cm.fn(c))
    assert pixel_accuracy(cm) == acc


def test_iou_rows_example():
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    a[0:2] = 1
    b[1:3] = 1
    cm = confusion_matrix(a, b, 2)
    assert iou_class(cm, 1) == pytest.approx(1 / 3, abs=0)
    assert brute_iou(a, b, 1) == 4 / 12


def test_iou_perfect_and_mean():
    m = np.array([[0, 1], [1, 0]])
    cm = confusion_matrix(m, m, 2)
    assert iou_class(cm, 1) == 1.0
    cm2 = ConfusionMatrix(np.array([[2, 0], [0, 0]])) + ConfusionMatrix(np.array([[0, 0], [2, 1]]))
    # IoU_0 = 2/4, IoU_1 = 1/3 -> mean 5/12
    assert mean_iou(cm2) == pytest.approx((0.5 + 1 / 3) / 2)


def test_miou_arithmetic_mean():
    # IoUs 1.0 and 1/3
    cm = ConfusionMatrix(np.array([[3, 0, 0], [0, 1, 1], [0, 1, 0]]))
    assert iou_class(cm, 0) == 1.0 and iou_class(cm, 1) == pytest.approx(1 / 3)
    cm = ConfusionMatrix(np.array([[3, 0], [0, 0]]))
    assert mean_iou(cm) == 1.0


def test_empty_cm_errors():
    with pytest.raises(ShapeError):
        pixel_accuracy(ConfusionMatrix.empty(4))
    with pytest.raises(ShapeError):
        iou_class(ConfusionMatrix.empty(2), 3)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_metrics_equal_brute_force(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.integers(0, 4, size=(16, 16)), rng.integers(0, 4, size=(16, 16))
    cm = confusion_matrix(p, t)
    assert pixel_accuracy(cm) == np.count_nonzero(p == t) / 256
    for c in range(4):
        assert iou_class(cm, c) == brute_iou(p, t, c)
        assert iou_class(cm, c) == iou_class(confusion_matrix(t, p), c)
        assert 0.0 <= iou_class(cm, c) <= 1.0


def test_evaluate_masks_merges():
    rng = np.random.default_rng(1)
    preds = [rng.integers(0, 4, size=(4, 4)) for _ in range(3)]
    truths = [rng.integers(0, 4, size=(4, 4)) for _ in range(3)]
    report = evaluate_masks(preds, truths)
    whole = confusion_matrix(np.stack(preds), np.stack(truths))
    assert np.array_equal(report["confusion"].counts, whole.counts)
    assert report["miou"] == mean_iou(whole)


# slag fraction -------------------------------------------------------------------


def test_slag_fraction_cases():
    cfg = MonitorConfig(height=16, width=16)
    m = np.zeros((16, 16), int)
    assert slag_fraction(m, cfg) == 0.0
    m.ravel()[:64] = 1
    assert slag_fraction(m, cfg) == 0.25
    assert slag_fraction(np.ones((16, 16), int), cfg) == 1.0
    with pytest.raises(ShapeError):
        slag_fraction(np.ones((8, 16), int), cfg)


def test_slag_fraction_permutation_invariant():
    rng = np.random.default_rng(0)
    m = rng.integers(0, 4, size=(16, 16))
    shuffled = rng.permutation(m.ravel()).reshape(16, 16)
    assert slag_fraction(m) == slag_fraction(shuffled)


# running variance -------------------------------------------------------------------


def test_running_variance_constant():
    assert running_variance([0.3] * 10, 4) == [0.0] * 7


def test_running_variance_two_values():
    out = running_variance([0.2, 0.4], 2)
    assert len(out) == 1 and abs(out[0] - 0.01) < 1e-15


def test_running_variance_length_and_errors():
    assert len(running_variance(np.linspace(0, 1, 100), MonitorConfig(window=60))) == 41
    with pytest.raises(ConfigError):
        running_variance([1, 2, 3], 1)
    with pytest.raises(ConfigError):
        MonitorConfig(window=1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000), k=st.integers(2, 70), n=st.integers(70, 600))
def test_running_variance_matches_two_pass(seed, k, n):
    rng = np.random.default_rng(seed)
    xs = np.cumsum(rng.normal(0, 0.01, size=n)) + rng.uniform(0, 1)
    out = running_variance(xs.tolist(), k)
    assert len(out) == n - k + 1
    for i, v in enumerate(out):
        assert abs(v - two_pass_var(xs[i : i + k].tolist())) < 1e-12


def test_streaming_class_emits_after_window():
    rv = RunningVariance(3)
    assert rv.push(1.0) is None and rv.push(2.0) is None
    assert rv.push(3.0) == pytest.approx(2 / 3)
