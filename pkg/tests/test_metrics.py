import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import accuracy_loop, breakeven_bruteforce, breakeven_by_windows, breakeven_pooled_bruteforce, counts_loop, iou_loop, relaxed_loop
from stackseg.metrics import (BREAKEVEN_MAX_THRESHOLDS, NoBreakevenError, accuracy, aggregate, breakeven_point,
                              breakeven_thresholds, confusion_counts, evaluate, format_table, format_wide_table, iou,
                              pooled_breakeven, relaxed_precision_recall)

masks = arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def block(shape, r0, c0, h, w):
    m = np.zeros(shape, bool)
    m[r0:r0 + h, c0:c0 + w] = True
    return m


def quantised(rng, shape):
    return rng.integers(0, 256, size=shape) / 255.0


class TestIoUAccuracy:
    def test_identical(self):
        m = block((8, 8), 1, 1, 3, 3)
        assert iou(m, m) == 1.0 and accuracy(m, m) == 1.0

    def test_disjoint(self):
        assert iou(block((8, 8), 0, 0, 2, 2), block((8, 8), 4, 4, 2, 2)) == 0.0

    def test_shifted_block(self):
        gt, pred = block((8, 8), 0, 0, 2, 2), block((8, 8), 0, 1, 2, 2)
        assert iou(gt, pred) == pytest.approx(1 / 3)
        assert accuracy(gt, pred) == pytest.approx(60 / 64)

    def test_complement(self):
        gt = block((8, 8), 2, 2, 3, 3)
        assert accuracy(gt, ~gt) == 0.0

    def test_both_empty(self):
        z = np.zeros((4, 4), bool)
        assert iou(z, z) == 1.0

    def test_shape_mismatch(self):
        for fn in (iou, accuracy, relaxed_precision_recall):
            with pytest.raises(ValueError):
                fn(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(st.data())
    def test_symmetry_and_oracle(self, data):
        a = data.draw(masks)
        b = data.draw(arrays(np.bool_, a.shape))
        assert iou(a, b) == iou(b, a) == iou_loop(a, b)
        assert accuracy(a, b) == accuracy(b, a) == accuracy_loop(a, b)
        assert confusion_counts(a, b) == counts_loop(a, b)


class TestRelaxed:
    def test_identical(self):
        m = block((16, 16), 4, 4, 5, 5)
        assert relaxed_precision_recall(m, m) == (1.0, 1.0)

    def test_shift_within_window(self):
        gt = block((32, 32), 10, 10, 4, 4)
        pred = np.roll(gt, 3, axis=0)
        assert relaxed_precision_recall(gt, pred) == (1.0, 1.0)

    def test_shift_outside_window(self):
        gt = np.zeros((32, 32), bool)
        gt[10, 10] = True
        pred = np.zeros_like(gt)
        pred[14, 10] = True
        assert relaxed_precision_recall(gt, pred) == (0.0, 0.0)

    def test_empty_conventions(self):
        z, m = np.zeros((8, 8), bool), block((8, 8), 1, 1, 2, 2)
        assert relaxed_precision_recall(m, z) == (1.0, 0.0)
        assert relaxed_precision_recall(z, m) == (0.0, 1.0)

    def test_negative_rho(self):
        with pytest.raises(ValueError):
            relaxed_precision_recall(np.zeros((2, 2)), np.zeros((2, 2)), rho=-1)

    @settings(max_examples=60)
    @given(st.data(), st.integers(0, 4))
    def test_oracle(self, data, rho):
        a = data.draw(masks)
        b = data.draw(arrays(np.bool_, a.shape))
        assert relaxed_precision_recall(a, b, rho) == pytest.approx(relaxed_loop(a, b, rho), abs=0)

    @given(st.data())
    def test_rho_zero_is_exact(self, data):
        a = data.draw(masks)
        b = data.draw(arrays(np.bool_, a.shape))
        tp, fp, fn, _ = counts_loop(a, b)
        p, r = relaxed_precision_recall(a, b, 0)
        assert p == (1.0 if tp + fp == 0 else tp / (tp + fp))
        assert r == (1.0 if tp + fn == 0 else tp / (tp + fn))

    @given(st.data())
    def test_monotone_in_rho_and_above_iou(self, data):
        a = data.draw(masks)
        b = data.draw(arrays(np.bool_, a.shape))
        prev = (0.0, 0.0)
        for rho in range(4):
            p, r = relaxed_precision_recall(a, b, rho)
            assert p >= prev[0] and r >= prev[1]
            if a.any() and b.any():
                assert iou(a, b) <= min(p, r)
            prev = (p, r)


class TestBreakeven:
    def test_perfect_scores(self):
        gt = block((16, 16), 3, 3, 5, 5)
        assert breakeven_point(gt, gt.astype(float)) == 1.0

    def test_inverted_scores_follow_the_oracle(self):
        gt = block((24, 24), 3, 3, 5, 5)
        scores = 1.0 - gt
        value = breakeven_point(gt, scores)
        assert value == pytest.approx(breakeven_bruteforce(gt, scores, 3), abs=1e-12)
        # no crossing: at tau = 0 everything is predicted, P = |dilated gt| / N = 121/576 and R = 1
        assert value == pytest.approx((121 / 576 + 1) / 2)

    @pytest.mark.parametrize("seed", range(6))
    def test_bruteforce_oracle_64(self, seed):
        rng = np.random.default_rng(seed)
        gt = np.zeros((64, 64), bool)
        for _ in range(4):
            r, c = rng.integers(0, 56, 2)
            gt[r:r + rng.integers(3, 9), c:c + rng.integers(3, 9)] = True
        blur = np.clip(gt + rng.normal(0, 0.35, gt.shape), 0, 1)
        scores = np.round(blur * 255) / 255
        assert breakeven_point(gt, scores) == pytest.approx(breakeven_bruteforce(gt, scores, 3), abs=1e-6)

    @pytest.mark.parametrize("rho", [0, 1, 3])
    def test_window_oracle_agrees_with_bruteforce(self, rho):
        rng = np.random.default_rng(rho)
        for _ in range(3):
            gt = rng.uniform(size=(12, 14)) > 0.7
            scores = quantised(rng, gt.shape)
            assert breakeven_by_windows(gt, scores, rho) == breakeven_bruteforce(gt, scores, rho)

    def test_constant_map_without_positives(self):
        with pytest.raises(NoBreakevenError):
            breakeven_point(np.zeros((4, 4)), np.full((4, 4), 0.3))

    def test_out_of_range_scores(self):
        with pytest.raises(ValueError):
            breakeven_point(np.zeros((2, 2)), np.full((2, 2), 1.5))

    def test_threshold_subsampling(self):
        scores = np.random.default_rng(0).uniform(size=(64, 64))
        t = breakeven_thresholds(scores)
        assert len(t) <= BREAKEVEN_MAX_THRESHOLDS
        assert t[0] == scores.min() and t[-1] == scores.max()
        assert set(t) <= set(scores.ravel())

    def test_pooled_single_image_matches_point(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(size=(32, 32)) > 0.8
        scores = quantised(rng, gt.shape)
        assert pooled_breakeven([gt], [scores]) == pytest.approx(breakeven_point(gt, scores), abs=1e-12)

    def test_pooled_oracle(self):
        rng = np.random.default_rng(4)
        gts = [block((16, 16), 2, 2, 6, 6), block((16, 16), 8, 5, 5, 7), np.zeros((12, 20), bool)]
        scores = [np.clip(g + rng.normal(0, 0.3, g.shape), 0, 1).round(2) for g in gts]
        assert pooled_breakeven(gts, scores) == pytest.approx(breakeven_pooled_bruteforce(gts, scores, 3), abs=1e-6)


class TestAggregate:
    def test_single_report_is_itself(self):
        gt, pred = block((8, 8), 0, 0, 3, 3), block((8, 8), 1, 1, 3, 3)
        r = evaluate(gt, pred, "a")
        agg = aggregate([r])
        assert agg.to_dict() | {"region": "a"} == r.to_dict()

    def test_all_tp_and_all_fn(self):
        gt = block((8, 8), 0, 0, 4, 4)
        agg = aggregate([evaluate(gt, gt), evaluate(gt, np.zeros_like(gt))])
        assert agg.iou == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    @settings(max_examples=40)
    @given(arrays(np.bool_, (12, 12)), arrays(np.bool_, (12, 12)), st.integers(1, 11))
    def test_partition_equals_whole(self, gt, pred, cut):
        whole = evaluate(gt, pred)
        parts = aggregate([evaluate(gt[:cut], pred[:cut]), evaluate(gt[cut:], pred[cut:])])
        assert parts.iou == whole.iou and parts.accuracy == whole.accuracy

    def test_concatenated_random_tiles(self):
        rng = np.random.default_rng(0)
        gts = [rng.uniform(size=(10, 10)) > 0.6 for _ in range(5)]
        preds = [rng.uniform(size=(10, 10)) > 0.5 for _ in range(5)]
        agg = aggregate([evaluate(g, p) for g, p in zip(gts, preds)])
        assert agg.iou == iou_loop(np.hstack(gts), np.hstack(preds))
        assert agg.accuracy == accuracy_loop(np.hstack(gts), np.hstack(preds))


class TestTables:
    def test_pred_equals_gt_row_of_ones(self):
        gt = block((8, 8), 2, 2, 3, 3)
        reports = [evaluate(gt, gt, "tile", scores=gt.astype(float))]
        table = format_table(reports + [aggregate(reports)])
        header, row, overall = table.strip().split("\n")
        assert header.split("\t")[:6] == ["region", "iou", "accuracy", "relaxed_precision", "relaxed_recall", "breakeven"]
        assert row.split("\t")[1:6] == ["1.000000"] * 5
        assert overall.startswith("Overall\t")

    def test_wide_table_has_overall_column(self):
        gt = block((8, 8), 2, 2, 3, 3)
        reports = [evaluate(gt, gt, "Austin"), evaluate(gt, ~gt, "Chicago")]
        text = format_wide_table(reports + [aggregate(reports)])
        assert text.split("\n")[0].split("\t") == ["metric", "Austin", "Chicago", "Overall"]
