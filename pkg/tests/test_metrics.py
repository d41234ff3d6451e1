"""Confusion matrix and IoU/Acc metrics against counting oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgbh.errors import ClassCountMismatch, LabelOutOfRange, ShapeMismatch
from rgbh.metrics import (
    ConfusionMatrix,
    mean_acc,
    mean_iou,
    merge,
    per_class_acc,
    per_class_iou,
    report_csv,
    report_dict,
    update,
)


def brute_force_cm(pred, gt, classes=6, ignore=255):
    """Per-pixel pair counting with explicit python loops."""
    cm = np.zeros((classes, classes), dtype=np.int64)
    for p, g in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel()):
        if g != ignore:
            cm[g, p] += 1
    return cm


def brute_force_metrics(cm):
    """Set-style IoU/Acc per class from raw counts."""
    classes = cm.shape[0]
    iou, acc = [], []
    for c in range(classes):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        iou.append(tp / (tp + fp + fn) if tp + fp + fn > 0 else None)
        acc.append(tp / (tp + fn) if tp + fn > 0 else None)
    return iou, acc


class TestUpdate:
    def test_diagonal_increment(self):
        cm = update(ConfusionMatrix(), np.full(4, 2), np.full(4, 2))
        assert cm.counts[2, 2] == 4 and cm.total == 4

    def test_all_ignored_unchanged(self):
        base = ConfusionMatrix()
        cm = update(base, np.array([1, 2]), np.array([255, 255]))
        assert (cm.counts == base.counts).all()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            update(ConfusionMatrix(), np.zeros((2, 2), int), np.zeros((2, 3), int))

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            update(ConfusionMatrix(), np.array([7]), np.array([1]))
        with pytest.raises(LabelOutOfRange):
            update(ConfusionMatrix(), np.array([1]), np.array([-1]))

    def test_random_maps_match_counting_oracle(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(0, 6, (16, 16))
        gt = rng.integers(0, 6, (16, 16))
        gt[rng.random((16, 16)) < 0.1] = 255
        cm = update(ConfusionMatrix(), pred, gt)
        np.testing.assert_array_equal(cm.counts, brute_force_cm(pred, gt))


class TestMerge:
    def test_identity_and_commutativity(self):
        rng = np.random.default_rng(1)
        a = update(ConfusionMatrix(), rng.integers(0, 6, 50), rng.integers(0, 6, 50))
        b = update(ConfusionMatrix(), rng.integers(0, 6, 50), rng.integers(0, 6, 50))
        zero = ConfusionMatrix()
        np.testing.assert_array_equal(merge(a, zero).counts, a.counts)
        np.testing.assert_array_equal(merge(a, b).counts, merge(b, a).counts)

    def test_sharded_equals_single_pass(self):
        rng = np.random.default_rng(2)
        pred = rng.integers(0, 6, 300)
        gt = rng.integers(0, 6, 300)
        single = update(ConfusionMatrix(), pred, gt)
        merged = ConfusionMatrix()
        for shard in np.split(np.arange(300), 3):
            merged = merge(merged, update(ConfusionMatrix(), pred[shard], gt[shard]))
        np.testing.assert_array_equal(merged.counts, single.counts)

    def test_class_count_mismatch(self):
        with pytest.raises(ClassCountMismatch):
            merge(ConfusionMatrix(), ConfusionMatrix(np.zeros((3, 3), int)))


class TestIou:
    def test_perfect_prediction(self):
        gt = np.tile(np.arange(6), 10)
        cm = update(ConfusionMatrix(), gt, gt)
        assert per_class_iou(cm) == [1.0] * 6
        assert mean_iou(cm) == 1.0

    def test_hand_counted_case(self):
        gt = np.array([0, 0, 1, 1])
        pred = np.array([0, 1, 1, 1])
        cm = update(ConfusionMatrix(), pred, gt)
        iou = per_class_iou(cm)
        assert iou[0] == pytest.approx(1 / 2)
        assert iou[1] == pytest.approx(2 / 3)
        assert mean_iou(cm) == pytest.approx(7 / 12)

    def test_absent_class_excluded(self):
        gt = np.array([0, 0])
        cm = update(ConfusionMatrix(), gt, gt)
        iou = per_class_iou(cm)
        assert iou[0] == 1.0 and iou[1:] == [None] * 5
        assert mean_iou(cm) == 1.0


class TestAcc:
    def test_perfect_prediction(self):
        gt = np.tile(np.arange(6), 3)
        cm = update(ConfusionMatrix(), gt, gt)
        assert per_class_acc(cm) == [1.0] * 6

    def test_hand_counted_case(self):
        gt = np.array([0, 0, 1, 1])
        pred = np.array([0, 1, 1, 1])
        cm = update(ConfusionMatrix(), pred, gt)
        acc = per_class_acc(cm)
        assert acc[0] == pytest.approx(0.5)
        assert acc[1] == pytest.approx(1.0)
        assert mean_acc(cm) == pytest.approx(0.75)

    def test_class_absent_from_gt_excluded(self):
        # class 3 predicted but never true: excluded from mAcc
        gt = np.array([0, 0, 1])
        pred = np.array([0, 3, 1])
        cm = update(ConfusionMatrix(), pred, gt)
        acc = per_class_acc(cm)
        assert acc[3] is None
        assert mean_acc(cm) == pytest.approx((0.5 + 1.0) / 2)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_iou_never_exceeds_acc(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.integers(0, 6, 64)
        gt = rng.integers(0, 6, 64)
        cm = update(ConfusionMatrix(), pred, gt)
        for iou, acc in zip(per_class_iou(cm), per_class_acc(cm)):
            if iou is not None and acc is not None:
                assert 0.0 <= iou <= acc <= 1.0

    def test_pixel_permutation_invariance(self):
        rng = np.random.default_rng(3)
        pred = rng.integers(0, 6, 100)
        gt = rng.integers(0, 6, 100)
        perm = rng.permutation(100)
        a = update(ConfusionMatrix(), pred, gt)
        b = update(ConfusionMatrix(), pred[perm], gt[perm])
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_oracle_agreement_over_random_pairs(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            pred = rng.integers(0, 6, (16, 16))
            gt = rng.integers(0, 6, (16, 16))
            cm = update(ConfusionMatrix(), pred, gt)
            ref = brute_force_cm(pred, gt)
            np.testing.assert_array_equal(cm.counts, ref)
            ref_iou, ref_acc = brute_force_metrics(ref)
            assert per_class_iou(cm) == ref_iou
            assert per_class_acc(cm) == ref_acc


class TestReports:
    def test_json_dict_fields(self):
        gt = np.tile(np.arange(6), 4)
        cm = update(ConfusionMatrix(), gt, gt)
        rep = report_dict(cm)
        assert rep["miou"] == 1.0 and rep["macc"] == 1.0
        assert rep["classes"] == ["Ground", "Vegetation", "Building", "Water", "Road", "Tree"]
        assert rep["pixels"] == 24

    def test_csv_schema(self):
        gt = np.tile(np.arange(6), 4)
        cm = update(ConfusionMatrix(), gt, gt)
        lines = report_csv(cm).strip().split("\n")
        assert lines[0] == "metric,ground,vegetation,building,water,road,tree,mean"
        assert lines[1].startswith("iou,1.000000")
        assert lines[2].startswith("acc,1.000000")
