"""Tests for IoU, instance matching, AP and the Aggregated Jaccard Index."""

import numpy as np
import pytest

from layerseg.metrics import (
    AP_THRESHOLDS,
    aji,
    average_precision,
    evaluate_dataset,
    evaluate_pair,
    iou,
    match_instances,
)


def square(shape, r0, c0, size):
    m = np.zeros(shape, dtype=bool)
    m[r0:r0 + size, c0:c0 + size] = True
    return m


def random_masks(rng, count, shape=(24, 24)):
    out = []
    for _ in range(count):
        size = int(rng.integers(3, 8))
        r0 = int(rng.integers(0, shape[0] - size))
        c0 = int(rng.integers(0, shape[1] - size))
        out.append(square(shape, r0, c0, size))
    return out


# -- iou -----------------------------------------------------------------

def test_iou_identical_and_disjoint():
    a = square((16, 16), 2, 2, 5)
    b = square((16, 16), 10, 10, 4)
    assert iou(a, a) == 1.0
    assert iou(a, b) == 0.0
    assert iou(np.zeros((4, 4), bool), np.zeros((4, 4), bool)) == 0.0


def test_iou_shifted_square_is_one_third():
    a = square((20, 20), 5, 2, 10)
    b = square((20, 20), 5, 7, 10)   # shifted 5 columns
    assert iou(a, b) == pytest.approx(1.0 / 3.0)


def test_iou_shape_mismatch():
    with pytest.raises(ValueError):
        iou(np.zeros((4, 4), bool), np.zeros((5, 5), bool))


# -- matching ------------------------------------------------------------

def test_match_perfect_prediction():
    gt = random_masks(np.random.default_rng(0), 4)
    for t in AP_THRESHOLDS:
        tp, fp, fn, matching = match_instances([m.copy() for m in gt], gt, t)
        assert (tp, fp, fn) == (4, 0, 0)
        assert matching == {i: i for i in range(4)}


def test_match_empty_prediction():
    gt = random_masks(np.random.default_rng(1), 3)
    tp, fp, fn, matching = match_instances([], gt, 0.5)
    assert (tp, fp, fn) == (0, 0, 3)
    assert matching == {}


def test_match_shifted_square_fails_at_half():
    a = square((20, 20), 5, 2, 10)
    b = square((20, 20), 5, 7, 10)
    tp, fp, fn, _ = match_instances([b], [a], 0.5)
    assert (tp, fp, fn) == (0, 1, 1)
    assert average_precision(tp, fp, fn) == 0.0


def test_match_threshold_is_strict():
    a = square((20, 20), 5, 2, 10)
    b = square((20, 20), 5, 7, 10)   # IoU exactly 1/3
    tp, _, _, _ = match_instances([b], [a], 1.0 / 3.0)
    assert tp == 0


def test_match_is_one_to_one():
    gt = [square((20, 20), 2, 2, 8)]
    preds = [square((20, 20), 2, 2, 8), square((20, 20), 3, 3, 8)]
    tp, fp, fn, matching = match_instances(preds, gt, 0.5)
    assert (tp, fp, fn) == (1, 1, 0)
    assert matching == {0: 0}        # highest IoU wins the single gt


def test_average_precision_values():
    assert average_precision(3, 1, 1) == pytest.approx(0.6)
    assert average_precision(0, 0, 0) == 1.0
    assert average_precision(0, 2, 3) == 0.0


# -- aji -----------------------------------------------------------------

def test_aji_perfect():
    gt = random_masks(np.random.default_rng(2), 3)
    assert aji([m.copy() for m in gt], gt) == pytest.approx(1.0)


def test_aji_empty_prediction():
    gt = random_masks(np.random.default_rng(3), 2)
    assert aji([], gt) == 0.0
    assert aji([], []) == 1.0


def test_aji_shifted_square_is_one_third():
    a = square((20, 20), 5, 2, 10)
    b = square((20, 20), 5, 7, 10)
    assert aji([b], [a]) == pytest.approx(1.0 / 3.0)


def test_aji_unused_prediction_penalized():
    gt = [square((20, 20), 2, 2, 6)]
    extra = square((20, 20), 12, 12, 6)
    base = aji([gt[0].copy()], gt)
    with_extra = aji([gt[0].copy(), extra], gt)
    assert base == pytest.approx(1.0)
    assert with_extra == pytest.approx(36 / 72)


def test_aji_direct_oracle():
    """Re-derive AJI with an independent implementation of the protocol."""
    rng = np.random.default_rng(4)
    for _ in range(10):
        gt = random_masks(rng, int(rng.integers(1, 5)))
        pred = random_masks(rng, int(rng.integers(0, 5)))
        used = set()
        inter = union = 0
        for g in gt:
            best, bj = 0.0, None
            for j, p in enumerate(pred):
                if j in used:
                    continue
                v = iou(p, g)
                if v > best:
                    best, bj = v, j
            if bj is None:
                union += int(g.sum())
            else:
                inter += int((g & pred[bj]).sum())
                union += int((g | pred[bj]).sum())
                used.add(bj)
        for j, p in enumerate(pred):
            if j not in used:
                union += int(p.sum())
        expected = inter / union if union else 1.0
        assert aji(pred, gt) == pytest.approx(expected)


# -- dataset evaluation --------------------------------------------------

def test_evaluate_pair_thresholds():
    gt = random_masks(np.random.default_rng(5), 3)
    counts, scene_aji = evaluate_pair([m.copy() for m in gt], gt)
    assert [c.threshold for c in counts] == list(AP_THRESHOLDS)
    assert all(c.ap == 1.0 for c in counts)
    assert scene_aji == pytest.approx(1.0)


def test_ap_nonincreasing_in_threshold():
    rng = np.random.default_rng(6)
    for _ in range(50):
        gt = random_masks(rng, int(rng.integers(1, 5)))
        pred = random_masks(rng, int(rng.integers(0, 6)))
        counts, _ = evaluate_pair(pred, gt)
        aps = [c.ap for c in counts]
        assert aps == sorted(aps, reverse=True)


def test_evaluate_dataset_perfect():
    gts = [random_masks(np.random.default_rng(s), 3) for s in range(3)]
    preds = [[m.copy() for m in gt] for gt in gts]
    report = evaluate_dataset(preds, gts)
    assert report.mean_ap == pytest.approx(1.0)
    assert report.aji == pytest.approx(1.0)


def test_evaluate_dataset_single_scene_equals_pair():
    rng = np.random.default_rng(7)
    gt = random_masks(rng, 4)
    pred = random_masks(rng, 4)
    counts, scene_aji = evaluate_pair(pred, gt)
    report = evaluate_dataset([pred], [gt])
    for pooled, c in zip(report.per_threshold, counts):
        assert (pooled.tp, pooled.fp, pooled.fn) == (c.tp, c.fp, c.fn)
    assert report.aji == pytest.approx(scene_aji)


def test_evaluate_dataset_duplicate_scene_same_ap():
    rng = np.random.default_rng(8)
    gt = random_masks(rng, 4)
    pred = random_masks(rng, 4)
    one = evaluate_dataset([pred], [gt])
    two = evaluate_dataset([pred, pred], [gt, gt])
    assert one.mean_ap == pytest.approx(two.mean_ap)
    assert one.aji == pytest.approx(two.aji)


def test_evaluate_dataset_length_mismatch():
    with pytest.raises(ValueError):
        evaluate_dataset([[]], [[], []])


def test_report_to_dict_keys():
    report = evaluate_dataset([[]], [[]])
    d = report.to_dict()
    assert set(d) == {"per_threshold", "mean_AP", "AJI"}
    assert len(d["per_threshold"]) == 5
    assert set(d["per_threshold"][0]) == {"t", "TP", "FP", "FN", "AP"}
