"""Tests for the copy-or-generate decoder."""

from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from _itc_common import ConfigError, GridShape, NumericalError
from itc_decoder import (
    DecodeConfig,
    FrameTokens,
    PredictionGrid,
    SamplingMode,
    decode_next_frame,
    decode_next_frame_detailed,
    direct_decode,
    full_mask,
    interior_mask,
    position_rng,
    sample_token,
)
from ot_solver import OtConfig, build_affinity, solve_decode_ot

SHAPE = GridShape(4, 4)


def _shift_right(frame: FrameTokens, fill: np.ndarray) -> FrameTokens:
    grid = frame.grid()
    out = np.empty_like(grid)
    out[:, 1:] = grid[:, :-1]
    out[:, 0] = fill
    return FrameTokens(out, frame.shape)


class TestSampleToken:
    def test_one_hot_either_mode(self):
        p = np.eye(5)[3]
        assert sample_token(p, SamplingMode.GREEDY) == 3
        assert sample_token(p, SamplingMode.CATEGORICAL, position_rng(0, 0)) == 3

    def test_greedy_argmax(self):
        assert sample_token([0.2, 0.5, 0.3], "greedy") == 1

    def test_greedy_ties_lowest(self):
        assert sample_token([0.4, 0.2, 0.4], "greedy") == 0

    def test_seeded_draw_is_reproducible(self):
        p = np.full(4, 0.25)
        draws = [sample_token(p, "categorical", position_rng(42, 7)) for _ in range(5)]
        assert len(set(draws)) == 1

    def test_uniform_frequencies(self):
        """10,000 uniform draws over K=4 land near 0.25 each."""
        rng = position_rng(123, 0)
        p = np.full(4, 0.25)
        counts = np.bincount([sample_token(p, "categorical", rng) for _ in range(10_000)], minlength=4)
        sigma = np.sqrt(0.25 * 0.75 / 10_000)
        assert np.abs(counts / 10_000 - 0.25).max() < 4 * sigma
        assert chisquare(counts).pvalue > 1e-3

    def test_not_normalized(self):
        with pytest.raises(NumericalError):
            sample_token([0.5, 0.6], "greedy")
        with pytest.raises(NumericalError):
            sample_token([1.2, -0.2], "greedy")

    def test_categorical_needs_generator(self):
        with pytest.raises(ConfigError):
            sample_token([0.5, 0.5], "categorical")


class TestInputs:
    def test_prediction_rows_must_sum_to_one(self):
        with pytest.raises(NumericalError):
            PredictionGrid(np.full((4, 2), 0.45), GridShape(2, 2))

    def test_frame_size_checked(self):
        with pytest.raises(ConfigError):
            FrameTokens([0, 1, 2], GridShape(2, 2))

    def test_geometry_mismatch(self):
        pred = PredictionGrid(np.full((4, 2), 0.5), GridShape(2, 2))
        with pytest.raises(ConfigError):
            decode_next_frame(pred, FrameTokens([0, 0, 0, 0], GridShape(1, 4)))

    def test_region_length_checked(self):
        pred = PredictionGrid(np.full((4, 2), 0.5), GridShape(2, 2))
        cfg = DecodeConfig(ot_region=np.ones(3))
        with pytest.raises(ConfigError):
            decode_next_frame(pred, FrameTokens([0, 1, 0, 1], GridShape(2, 2)), cfg)

    def test_from_logits(self):
        pred = PredictionGrid.from_logits(np.zeros((4, 4)), GridShape(2, 2))
        np.testing.assert_allclose(pred.probs, 0.25)


class TestDecodeExamples:
    def test_single_cell(self):
        shape = GridShape(1, 1)
        pred = PredictionGrid([[1.0, 0.0, 0.0]], shape)
        out = decode_next_frame(pred, FrameTokens([0], shape), DecodeConfig(ot_region=[1]))
        assert out.tokens.tolist() == [0]

    def test_absent_token_uses_wildcard(self):
        """A token missing from the previous frame can only come from the wildcard."""
        prev = FrameTokens(np.zeros(SHAPE.size, dtype=int), SHAPE)
        target = prev.tokens.copy()
        target[5] = 2
        pred = PredictionGrid.one_hot(FrameTokens(target, SHAPE), 3)
        res = decode_next_frame_detailed(pred, prev, DecodeConfig(sampling="greedy"))
        assert res.frame.tokens[5] == 2
        assert res.sources[5] == -1
        assert res.assignment.gen[5] == 1

    def test_shift_reproduces_predicted_frame(self):
        """1,000 random 4x4 frames shifted one cell right decode to the shifted frame."""
        rng = np.random.default_rng(0)
        cfg = DecodeConfig(ot=OtConfig(c_d=0.6, c_w=0.3, cap=4), sampling="greedy")
        for _ in range(1000):
            prev = FrameTokens(rng.integers(5, size=SHAPE.size), SHAPE)
            shifted = _shift_right(prev, rng.integers(5, size=SHAPE.height))
            res = decode_next_frame_detailed(PredictionGrid.one_hot(shifted, 5), prev, cfg)
            assert res.frame == shifted
            assert Counter(res.frame.tokens.tolist()) == Counter(shifted.tokens.tolist())
            copied = res.sources >= 0
            np.testing.assert_array_equal(
                prev.tokens[res.sources[copied]], shifted.tokens[copied]
            )

    def test_shift_with_categorical_sampling(self):
        rng = np.random.default_rng(1)
        for seed in range(50):
            prev = FrameTokens(rng.integers(5, size=SHAPE.size), SHAPE)
            shifted = _shift_right(prev, rng.integers(5, size=SHAPE.height))
            cfg = DecodeConfig(sampling="categorical", rng_seed=seed)
            assert decode_next_frame(PredictionGrid.one_hot(shifted, 5), prev, cfg) == shifted


class TestDecodeProperties:
    def test_copy_identity(self):
        """A one-hot prediction of the previous frame reproduces it."""
        rng = np.random.default_rng(2)
        for c_d in (0.0, 0.3, 0.6, 1.0):
            for c_w in (0.1, 0.3, 0.6, 0.9):
                for cap in (0.0, 1.0, 4.0):
                    cfg = DecodeConfig(ot=OtConfig(c_d=c_d, c_w=c_w, cap=cap), sampling="greedy")
                    for _ in range(5):
                        prev = FrameTokens(rng.integers(6, size=SHAPE.size), SHAPE)
                        pred = PredictionGrid.one_hot(prev, 6)
                        assert decode_next_frame(pred, prev, cfg) == prev

    def test_no_source_copied_twice(self):
        rng = np.random.default_rng(3)
        for seed in range(200):
            prev = FrameTokens(rng.integers(4, size=SHAPE.size), SHAPE)
            pred = PredictionGrid(rng.dirichlet(np.full(4, 0.3), size=SHAPE.size), SHAPE)
            res = decode_next_frame_detailed(pred, prev, DecodeConfig(rng_seed=seed))
            copied = res.sources[res.sources >= 0]
            assert np.unique(copied).size == copied.size
            res.assignment.validate()

    def test_copies_follow_transported_mass(self):
        """Every copied pair carries mass in the transport plan."""
        rng = np.random.default_rng(5)
        for seed in range(100):
            cfg = DecodeConfig(ot_region=full_mask(SHAPE), rng_seed=seed)
            prev = FrameTokens(rng.integers(3, size=SHAPE.size), SHAPE)
            pred = PredictionGrid(rng.dirichlet(np.full(3, 0.5), size=SHAPE.size), SHAPE)
            plan = solve_decode_ot(build_affinity(pred, prev, cfg.ot), cfg.ot)
            res = decode_next_frame_detailed(pred, prev, cfg)
            dest = np.flatnonzero(res.sources >= 0)
            assert (plan.prev[res.sources[dest], dest] > 0).all()

    def test_region_mask_matches_direct_sampling(self):
        """Outside the OT region the output is the direct transformer sample."""
        rng = np.random.default_rng(4)
        shape = GridShape(5, 6)
        region = interior_mask(shape)
        for seed in range(50):
            prev = FrameTokens(rng.integers(4, size=shape.size), shape)
            pred = PredictionGrid(rng.dirichlet(np.ones(4), size=shape.size), shape)
            cfg = DecodeConfig(ot_region=region, rng_seed=seed)
            out = decode_next_frame(pred, prev, cfg)
            direct = direct_decode(pred, cfg)
            np.testing.assert_array_equal(out.tokens[~region], direct.tokens[~region])

    def test_empty_region_is_direct_decode(self):
        rng = np.random.default_rng(5)
        prev = FrameTokens(rng.integers(3, size=SHAPE.size), SHAPE)
        pred = PredictionGrid(rng.dirichlet(np.ones(3), size=SHAPE.size), SHAPE)
        cfg = DecodeConfig(ot_region=np.zeros(SHAPE.size), rng_seed=9)
        res = decode_next_frame_detailed(pred, prev, cfg)
        assert res.assignment is None
        assert res.frame == direct_decode(pred, cfg)

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        prev = FrameTokens(rng.integers(4, size=SHAPE.size), SHAPE)
        pred = PredictionGrid(rng.dirichlet(np.ones(4), size=SHAPE.size), SHAPE)
        cfg = DecodeConfig(rng_seed=77)
        a = decode_next_frame(pred, prev, cfg)
        b = decode_next_frame(pred, prev, cfg)
        assert a.tokens.tobytes() == b.tokens.tobytes()


class TestInteriorMask:
    def test_border_one(self):
        mask = interior_mask(GridShape(4, 4)).reshape(4, 4)
        expected = np.zeros((4, 4), dtype=bool)
        expected[1:3, 1:3] = True
        np.testing.assert_array_equal(mask, expected)

    def test_border_zero_is_full(self):
        np.testing.assert_array_equal(interior_mask(GridShape(3, 5), border=0),
                                      full_mask(GridShape(3, 5)))
        assert full_mask(GridShape(3, 5)).all()

    def test_negative_border(self):
        with pytest.raises(ConfigError):
            interior_mask(GridShape(3, 3), border=-1)
