"""Tests for the nearest-neighbour patch tokenizer."""

import numpy as np
import pytest

from _itc_common import ConfigError, GridShape
from itc_decoder import FrameTokens
from tokenizer import (
    Codebook,
    TokenizerConfig,
    decode_frame,
    encode_frame,
    encode_patch,
    grow_codebook,
    grow_from_frames,
    split_patches,
)


def _codebook(codes, patch_shape=(1, 1, 2), tau=0.75, k_max=4096):
    return Codebook(patch_shape, tau, k_max, codes=np.asarray(codes, dtype=float))


class TestEncodePatch:
    def test_exact_code(self):
        rng = np.random.default_rng(0)
        codes = rng.uniform(size=(8, 2))
        cb = _codebook(codes)
        assert encode_patch(codes[5].reshape(1, 1, 2), cb) == 5

    def test_equidistant_goes_to_lowest(self):
        cb = _codebook([[5.0, 5.0], [0.0, 0.0], [9.0, 9.0], [2.0, 0.0]])
        assert encode_patch(np.array([1.0, 0.0]).reshape(1, 1, 2), cb) == 1

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(1)
        cb = Codebook((2, 2, 3), codes=rng.uniform(size=(10, 12)))
        for _ in range(200):
            p = rng.uniform(size=(2, 2, 3))
            dists = [float(((p.reshape(-1) - c) ** 2).sum()) for c in cb.flat_codes]
            assert encode_patch(p, cb) == int(np.argmin(dists))

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            encode_patch(np.zeros((2, 2, 1)), _codebook([[0.0, 0.0]]))

    def test_empty_codebook(self):
        with pytest.raises(ConfigError):
            encode_patch(np.zeros((1, 1, 2)), Codebook((1, 1, 2)))


class TestGrowCodebook:
    def test_empty_grows(self):
        cb, grew = grow_codebook(np.zeros((1, 1, 1)), Codebook((1, 1, 1)))
        assert grew and cb.size == 1

    def test_identical_not_added(self):
        cb = _codebook([[0.0]], patch_shape=(1, 1, 1))
        cb, grew = grow_codebook(np.zeros((1, 1, 1)), cb)
        assert not grew and cb.size == 1

    def test_just_past_threshold_added(self):
        """Squared distance 0.76 exceeds tau=0.75."""
        cb = _codebook([[0.0]], patch_shape=(1, 1, 1))
        cb, grew = grow_codebook(np.full((1, 1, 1), np.sqrt(0.76)), cb)
        assert grew and cb.size == 2
        assert cb.insert_distances[-1] == pytest.approx(0.76)

    def test_at_threshold_not_added(self):
        cb = _codebook([[0.0, 0.0]], tau=1.0)
        cb, grew = grow_codebook(np.array([1.0, 0.0]).reshape(1, 1, 2), cb)
        assert not grew

    def test_overflow_counter(self):
        cb = Codebook((1, 1, 1), tau=0.1, k_max=2)
        for v in range(5):
            grow_codebook(np.full((1, 1, 1), float(v)), cb)
        assert cb.size == 2
        assert cb.overflow_count == 3

    def test_ids_are_stable(self):
        """Growth appends; earlier codes keep their index."""
        rng = np.random.default_rng(2)
        cb = Codebook((1, 1, 3), tau=0.05)
        seen = {}
        for _ in range(100):
            p = rng.uniform(size=(1, 1, 3))
            grow_codebook(p, cb)
            for idx, code in seen.items():
                np.testing.assert_array_equal(cb.flat_codes[idx], code)
            seen = {i: cb.flat_codes[i].copy() for i in range(cb.size)}

    def test_separation(self):
        """Every insertion was farther than tau from all earlier codes."""
        rng = np.random.default_rng(3)
        cb = Codebook((2, 1, 1), tau=0.2)
        for _ in range(300):
            grow_codebook(rng.uniform(size=(2, 1, 1)), cb)
        codes = cb.flat_codes
        for k in range(1, cb.size):
            d = ((codes[:k] - codes[k]) ** 2).sum(axis=1)
            assert d.min() > cb.tau
            assert cb.insert_distances[k] == pytest.approx(d.min())


class TestFrames:
    def test_split_order_is_row_major(self):
        img = np.arange(4 * 6).reshape(4, 6, 1).astype(float)
        patches, shape = split_patches(img, (2, 3, 1))
        assert shape == GridShape(2, 2)
        np.testing.assert_array_equal(patches[1], [3, 4, 5, 9, 10, 11])
        np.testing.assert_array_equal(patches[2], [12, 13, 14, 18, 19, 20])

    def test_not_divisible(self):
        with pytest.raises(ConfigError):
            split_patches(np.zeros((5, 6, 1)), (2, 3, 1))

    def test_wrong_channels(self):
        with pytest.raises(ConfigError):
            split_patches(np.zeros((4, 6, 2)), (2, 3, 1))

    def test_round_trip_from_codes(self):
        rng = np.random.default_rng(4)
        cb = Codebook((2, 2, 3), codes=rng.uniform(size=(6, 12)))
        tokens = FrameTokens(rng.integers(6, size=12), GridShape(3, 4))
        image = decode_frame(tokens, cb)
        assert image.shape == (6, 8, 3)
        assert encode_frame(image, cb) == tokens

    def test_symbolic_grid_gives_one_token_per_cell(self):
        rng = np.random.default_rng(5)
        image = np.eye(5)[rng.integers(5, size=(6, 7))]
        cb = Codebook((1, 1, 5), codes=np.eye(5))
        frame = encode_frame(image, cb)
        assert frame.shape == GridShape(6, 7)
        assert frame.tokens.size == 42

    def test_novel_patch_round_trips_after_growth(self):
        cb = Codebook((1, 1, 5), codes=np.eye(5)[:3])
        image = np.eye(5)[np.array([[0, 1], [4, 2]])]
        added = grow_from_frames([image], cb)
        assert added == 1 and cb.size == 4
        np.testing.assert_array_equal(decode_frame(encode_frame(image, cb), cb), image)

    def test_encode_is_idempotent(self):
        rng = np.random.default_rng(6)
        cb = Codebook((2, 2, 1), codes=rng.uniform(size=(5, 4)))
        image = rng.uniform(size=(4, 4, 1))
        once = encode_frame(image, cb)
        assert encode_frame(decode_frame(once, cb), cb) == once

    def test_unknown_token(self):
        cb = Codebook((1, 1, 2), codes=np.eye(2))
        with pytest.raises(ConfigError):
            decode_frame(FrameTokens([0, 3], GridShape(1, 2)), cb)


class TestCodebookMeta:
    def test_content_hash_tracks_codes(self):
        a = Codebook((1, 1, 2), codes=np.eye(2))
        b = Codebook((1, 1, 2), codes=np.eye(2))
        assert a.content_hash() == b.content_hash()
        grow_codebook(np.full((1, 1, 2), 3.0), b)
        assert a.content_hash() != b.content_hash()

    def test_content_hash_tracks_tau(self):
        a = Codebook((1, 1, 2), tau=0.75, codes=np.eye(2))
        b = Codebook((1, 1, 2), tau=0.5, codes=np.eye(2))
        assert a.content_hash() != b.content_hash()

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TokenizerConfig(patch_shape=(0, 1, 1))
        with pytest.raises(ConfigError):
            TokenizerConfig(tau=-1.0)
        with pytest.raises(ConfigError):
            TokenizerConfig(k_max=0)

    def test_from_config(self):
        cb = Codebook.from_config(TokenizerConfig((1, 1, 5), 0.5, 16))
        assert cb.size == 0 and cb.patch_shape == (1, 1, 5) and cb.k_max == 16
