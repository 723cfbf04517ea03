import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import grid_steps, mirror_pad_loop
from stackseg.model import UNetConfig, build_unet
from stackseg.pipeline import (ALL_TRANSFORMS, THRESHOLD_CANDIDATES, AugTransform, PredictionJob, apply_transform,
                               assemble, extract_patches, invert, make_predictor, mirror_pad, parse_scale, plan_grid,
                               predict_scores, rescale, run_prediction, threshold, threshold_sweep, tta_predict,
                               tune_threshold)
from stackseg.tensor import Tensor


def identity_predictor(margin):
    """Returns the centre crop of channel 0: the geometric identity of the pipeline."""
    def predict(batch):
        p = batch.shape[-1]
        return batch[:, :1, margin:p - margin, margin:p - margin].copy()
    return predict


def constant_predictor(value, margin):
    def predict(batch):
        p = batch.shape[-1] - 2 * margin
        return np.full((batch.shape[0], 1, p, p), value, np.float32)
    return predict


class TestMirrorPad:
    def test_zero_margin(self):
        x = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(mirror_pad(x, 0), x)

    def test_reflection_row(self):
        row = np.array([[1, 2, 3]] * 3)
        assert mirror_pad(row, 1)[1].tolist() == [2, 1, 2, 3, 2]

    def test_margin_too_large(self):
        with pytest.raises(ValueError):
            mirror_pad(np.zeros((4, 6)), 4)

    @settings(max_examples=40)
    @given(st.integers(2, 9), st.integers(2, 9), st.integers(0, 8), st.booleans())
    def test_loop_oracle_and_interior(self, h, w, margin, channels):
        margin = min(margin, min(h, w) - 1)
        shape = (h, w, 3) if channels else (h, w)
        x = np.random.default_rng(h * 31 + w).normal(size=shape)
        padded = mirror_pad(x, margin)
        np.testing.assert_array_equal(padded, mirror_pad_loop(x, margin))
        np.testing.assert_array_equal(padded[margin:margin + h, margin:margin + w], x)


class TestGrid:
    def test_large_tile_arithmetic(self):
        grid = plan_grid((5000, 5000), 224, 16)
        assert grid.stride == 192
        assert len(grid.row_origins) == len(grid.col_origins) == 27 == grid_steps(5000, 224, 16)
        assert grid.row_origins[-1] == 5000 - 192

    def test_single_patch(self):
        assert len(plan_grid((192, 192), 224, 16)) == 1

    def test_degenerate(self):
        with pytest.raises(ValueError):
            plan_grid((100, 100), 32, 16)
        with pytest.raises(ValueError):
            plan_grid((10, 100), 72, 8)

    @settings(max_examples=50)
    @given(st.integers(16, 300), st.integers(16, 300), st.sampled_from([(24, 4), (32, 8), (16, 0), (72, 8)]))
    def test_coverage_and_bounds(self, h, w, geometry):
        patch, margin = geometry
        if min(h, w) < patch - 2 * margin:
            return
        grid = plan_grid((h, w), patch, margin)
        s = grid.stride
        count = np.zeros((h, w), int)
        for r, c in grid.origins:
            # patch read stays inside the padded raster
            assert 0 <= r and r + patch <= h + 2 * margin and 0 <= c and c + patch <= w + 2 * margin
            count[r:r + s, c:c + s] += 1
        assert (count >= 1).all()
        # origins advance by the stride; only the last one is clamped back inside
        for origins, size in ((grid.row_origins, h), (grid.col_origins, w)):
            assert list(origins[:-1]) == list(range(0, s * (len(origins) - 1), s))
            assert origins[-1] == min(s * (len(origins) - 1), size - s)
        assert len(grid) == grid_steps(h, patch, margin) * grid_steps(w, patch, margin)

    def test_halving_resolution_quarters_patch_count(self):
        full = len(plan_grid((1024, 1024), 72, 8))
        half = len(plan_grid((512, 512), 72, 8))
        assert 3.5 <= full / half <= 4.5


class TestExtractAssemble:
    def test_constant_raster(self):
        x = np.full((40, 50, 3), 0.25)
        grid = plan_grid(x.shape, 24, 4)
        for batch in extract_patches(mirror_pad(x, 4), grid, 3):
            assert batch.shape[1:] == (3, 24, 24) and (batch == 0.25).all()

    def test_first_patch_is_top_left_window(self):
        x = np.random.default_rng(0).normal(size=(40, 50, 2)).astype(np.float32)
        padded = mirror_pad(x, 4)
        first = next(extract_patches(padded, plan_grid(x.shape, 24, 4), 1))[0]
        np.testing.assert_array_equal(first, np.moveaxis(padded[:24, :24], -1, 0))

    def test_batches_in_order_and_sized(self):
        x = np.zeros((100, 100, 1))
        grid = plan_grid(x.shape, 24, 4)
        sizes = [b.shape[0] for b in extract_patches(mirror_pad(x, 4), grid, 7)]
        assert sum(sizes) == len(grid) and all(s == 7 for s in sizes[:-1])

    @pytest.mark.parametrize("shape", [(500, 700), (57, 91), (80, 80), (133, 64), (64, 200)])
    def test_round_trip_bit_exact(self, shape):
        rng = np.random.default_rng(sum(shape))
        x = rng.uniform(size=shape + (3,)).astype(np.float32)
        margin = 8
        grid = plan_grid(shape, 72, margin)
        predict = identity_predictor(margin)
        outs = [o[0] for b in extract_patches(mirror_pad(x, margin), grid, 16) for o in predict(b)]
        np.testing.assert_array_equal(assemble(outs, grid), x[..., 0])

    def test_checkerboard_of_constants_lands_at_offsets(self):
        grid = plan_grid((40, 40), 16, 3)  # stride 10, 4x4 cells, no clamping
        outs = [np.full((10, 10), k, np.float32) for k in range(len(grid))]
        full = assemble(outs, grid)
        for k, (r, c) in enumerate(grid.origins):
            assert (full[r:r + 10, c:c + 10] == k).all()

    def test_last_writer_wins_on_clamped_cells(self):
        grid = plan_grid((25, 10), 10, 0)  # rows at 0, 10, 15
        full = assemble([np.full((10, 10), k, np.float32) for k in range(3)], grid)
        assert (full[15:] == 2).all() and (full[10:15] == 1).all()

    def test_missing_cell(self):
        grid = plan_grid((40, 40), 16, 3)
        with pytest.raises(ValueError):
            assemble([np.zeros((10, 10))] * (len(grid) - 1), grid)

    def test_multichannel_outputs(self):
        grid = plan_grid((20, 20), 10, 0)
        full = assemble([np.full((2, 10, 10), k) for k in range(4)], grid)
        assert full.shape == (20, 20, 2)


class TestTransforms:
    def test_eight_distinct_permutations(self):
        x = np.arange(16).reshape(4, 4)
        images = {apply_transform(x, t).tobytes() for t in ALL_TRANSFORMS}
        assert len(images) == 8

    def test_inverse_law_exhaustive(self):
        x = np.arange(2 * 5 * 5).reshape(2, 5, 5)
        for t in ALL_TRANSFORMS:
            np.testing.assert_array_equal(apply_transform(apply_transform(x, t), invert(t)), x)

    def test_group_closure(self):
        x = np.arange(25).reshape(5, 5)
        table = {apply_transform(x, t).tobytes(): t for t in ALL_TRANSFORMS}
        for a, b in itertools.product(ALL_TRANSFORMS, repeat=2):
            assert apply_transform(apply_transform(x, a), b).tobytes() in table

    def test_simple_laws(self):
        x = np.random.default_rng(0).normal(size=(3, 6, 6))
        np.testing.assert_array_equal(apply_transform(x, AugTransform.IDENTITY), x)
        hh = apply_transform(apply_transform(x, AugTransform.HFLIP), AugTransform.HFLIP)
        np.testing.assert_array_equal(hh, x)
        y = x
        for _ in range(4):
            y = apply_transform(y, AugTransform.ROT90)
        np.testing.assert_array_equal(y, x)

    def test_non_square(self):
        with pytest.raises(ValueError):
            apply_transform(np.zeros((4, 5)), AugTransform.ROT90)


class TestTTA:
    def test_constant_model(self):
        patches = np.random.default_rng(0).normal(size=(3, 3, 24, 24)).astype(np.float32)
        out = tta_predict(constant_predictor(0.375, 4), patches)
        assert (out == np.float32(0.375)).all()

    def test_equivariant_predictor(self):
        patches = np.random.default_rng(1).uniform(size=(2, 3, 24, 24)).astype(np.float32)
        predict = identity_predictor(4)
        np.testing.assert_allclose(tta_predict(predict, patches), predict(patches), atol=1e-6)

    def test_symmetric_input_gives_symmetric_output(self):
        rng = np.random.default_rng(2)
        model = build_unet(UNetConfig(2, 4, 3, 4, 24), rng)
        model.forward(Tensor(rng.uniform(size=(2, 3, 24, 24)).astype(np.float32)), "train")
        patch = rng.uniform(size=(1, 3, 24, 24)).astype(np.float32)
        sym = np.zeros_like(patch)
        for k in range(4):
            sym += np.rot90(patch, k, (2, 3))
        sym /= 4
        np.testing.assert_allclose(np.rot90(sym, 1, (2, 3)), sym, atol=1e-6)
        out = tta_predict(make_predictor(model), sym)
        np.testing.assert_allclose(np.rot90(out, 1, (2, 3)), out, atol=1e-6)


class TestThreshold:
    def test_values(self):
        assert threshold(np.array([0.4, 0.6]), 0.5).tolist() == [0, 1]

    def test_near_one(self):
        scores = np.random.default_rng(0).uniform(0, 0.999, size=100)
        assert threshold(scores, 1 - 1e-9).sum() == 0

    @pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5])
    def test_out_of_range(self, tau):
        with pytest.raises(ValueError):
            threshold(np.zeros(3), tau)

    @given(arrays(np.float64, 20, elements=st.floats(0, 1)), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_monotone(self, scores, t1, t2):
        lo, hi = min(t1, t2), max(t1, t2)
        assert (threshold(scores, lo) >= threshold(scores, hi)).all()


class TestTuneThreshold:
    def test_perfect_scores_pick_lowest(self):
        gt = np.random.default_rng(0).uniform(size=(16, 16)) > 0.5
        tau, curve = tune_threshold([gt.astype(float)], [gt])
        assert tau == 0.05 and len(curve) == 19

    def test_two_level_scores(self):
        gt = np.random.default_rng(1).uniform(size=(16, 16)) > 0.5
        scores = 0.4 * (1 - gt) + 0.6 * gt
        tau, _ = tune_threshold([scores], [gt])
        assert tau == 0.45

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (8, 8), elements=st.floats(0, 1)), arrays(np.bool_, (8, 8)))
    def test_range_and_consistency(self, scores, gt):
        tau, curve = tune_threshold([scores], [gt])
        assert 0.05 <= tau <= 0.95
        assert dict(curve)[tau] == max(v for _, v in curve)
        assert [t for t, _ in curve] == list(THRESHOLD_CANDIDATES)

    def test_empty(self):
        with pytest.raises(ValueError):
            threshold_sweep([], [])


class TestRescale:
    def test_scale_one_identity(self):
        x = np.random.default_rng(0).uniform(size=(8, 8))
        np.testing.assert_array_equal(rescale(x, 1), x.astype(np.float32))

    @pytest.mark.parametrize("factor", ["1/2", "1/4"])
    def test_constant(self, factor):
        x = np.full((16, 16, 3), 0.7, np.float32)
        down = rescale(x, factor, "down")
        assert down.shape == (16 // int(1 / Fraction(factor)),) * 2 + (3,)
        np.testing.assert_allclose(down, 0.7, atol=1e-6)
        np.testing.assert_allclose(rescale(down, factor, "up"), 0.7, atol=1e-6)

    @pytest.mark.parametrize("factor", ["1/2", "1/4"])
    def test_ramp_round_trip(self, factor):
        ramp = np.tile(np.linspace(0, 255, 512, dtype=np.float32), (64, 1))
        back = rescale(rescale(ramp, factor, "down"), factor, "up")
        assert back.shape == ramp.shape
        assert np.abs(back - ramp).max() <= 1.0

    def test_box_average(self):
        x = np.arange(16, dtype=np.float32).reshape(4, 4)
        np.testing.assert_array_equal(rescale(x, "1/2"), [[2.5, 4.5], [10.5, 12.5]])

    def test_indivisible(self):
        with pytest.raises(ValueError):
            rescale(np.zeros((10, 10)), "1/4")

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            parse_scale("1/3")


class TestRunPrediction:
    def test_identity_model_shape_and_values(self):
        x = np.random.default_rng(0).uniform(size=(100, 130, 3)).astype(np.float32)
        res = run_prediction(PredictionJob(x, identity_predictor(8), 72, 8, threshold=0.5, tta=False))
        assert res.mask.shape == res.scores.shape == (100, 130)
        np.testing.assert_array_equal(res.scores, x[..., 0])
        assert {"predict_seconds", "rescale_seconds", "patches"} <= res.timing.keys()

    def test_tta_identity_is_exact_up_to_rounding(self):
        x = np.random.default_rng(0).uniform(size=(64, 64, 3)).astype(np.float32)
        res = run_prediction(PredictionJob(x, identity_predictor(8), 72, 8, tta=True))
        np.testing.assert_allclose(res.scores, x[..., 0], atol=1e-6)

    def test_half_scale_upsamples_and_reduces_patches(self):
        x = np.random.default_rng(0).uniform(size=(448, 448, 3)).astype(np.float32)
        full = run_prediction(PredictionJob(x, constant_predictor(0.8, 8), 72, 8, tta=False))
        half = run_prediction(PredictionJob(x, constant_predictor(0.8, 8), 72, 8, tta=False, scale="1/2"))
        assert half.mask.shape == (448, 448) and half.mask.all()
        assert 3.5 <= full.timing["patches"] / half.timing["patches"] <= 4.5

    def test_small_raster(self):
        x = np.random.default_rng(0).uniform(size=(20, 30, 3)).astype(np.float32)
        scores, n = predict_scores(x, identity_predictor(8), 72, 8, tta=False)
        np.testing.assert_array_equal(scores, x[..., 0])
        assert n == 1

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            PredictionJob(np.zeros((4, 4, 3)), identity_predictor(0), 8, 0, threshold=1.0)
