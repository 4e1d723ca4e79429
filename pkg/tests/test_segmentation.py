import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fccseg.episodes import GridMask
from fccseg.segmentation import (
    ScoreMap,
    kshot_merge,
    load_score_map,
    mask_to_pgm,
    minmax_normalize,
    prior_score,
    save_score_map,
    threshold_mask,
    upsample_mask,
)

from .oracles import minmax_normalize as oracle_minmax
from .oracles import naive_prior_score


class TestPriorScore:
    def test_max_over_singleton_foreground(self):
        vol = np.zeros((1, 1, 1, 1, 2), dtype=np.float32)
        vol[0, 0, 0, 0, 0] = 0.2  # foreground cell
        vol[0, 0, 0, 0, 1] = 0.9  # background cell, must be ignored
        mask = GridMask(np.array([[1, 0]], dtype=np.uint8))
        raw = prior_score(vol, mask, normalize=False)
        assert raw.values[0, 0] == pytest.approx(0.2)

    def test_constant_volume_normalizes_to_half(self):
        vol = np.full((2, 2, 2, 2, 2), 0.7, dtype=np.float32)
        mask = GridMask(np.ones((2, 2), dtype=np.uint8))
        s = prior_score(vol, mask)
        np.testing.assert_allclose(s.values, 0.5)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        vol = rng.uniform(-1, 1, size=(2, 2, 2, 3, 3)).astype(np.float32)
        mask_values = np.zeros((3, 3), dtype=np.uint8)
        mask_values[0, 1] = mask_values[2, 2] = mask_values[1, 0] = 1
        mask = GridMask(mask_values)
        expected = oracle_minmax(naive_prior_score(vol, mask_values))
        got = prior_score(vol, mask)
        np.testing.assert_allclose(got.values, expected, atol=1e-7)

    def test_empty_foreground_rejected(self):
        vol = np.zeros((1, 1, 1, 2, 2), dtype=np.float32)
        with pytest.raises(ValueError, match="foreground"):
            prior_score(vol, GridMask(np.zeros((2, 2), dtype=np.uint8)))

    def test_extent_mismatch(self):
        vol = np.zeros((1, 1, 1, 2, 2), dtype=np.float32)
        with pytest.raises(ValueError, match="extent"):
            prior_score(vol, GridMask(np.ones((3, 3), dtype=np.uint8)))

    def test_permutation_invariant_over_foreground(self):
        rng = np.random.default_rng(5)
        vol = rng.uniform(-1, 1, size=(3, 2, 2, 2, 2)).astype(np.float32)
        mask = GridMask(np.ones((2, 2), dtype=np.uint8))
        flipped = np.flip(np.flip(vol, axis=3), axis=4).copy()
        a = prior_score(vol, mask, normalize=False)
        b = prior_score(flipped, mask, normalize=False)
        np.testing.assert_allclose(a.values, b.values, atol=0)

    def test_growing_foreground_never_decreases_scores(self):
        rng = np.random.default_rng(6)
        vol = rng.uniform(-1, 1, size=(2, 3, 3, 3, 3)).astype(np.float32)
        small = np.zeros((3, 3), dtype=np.uint8)
        small[1, 1] = 1
        big = small.copy()
        big[0, 0] = big[2, 1] = 1
        s_small = prior_score(vol, GridMask(small), normalize=False)
        s_big = prior_score(vol, GridMask(big), normalize=False)
        assert (s_big.values >= s_small.values - 1e-12).all()


class TestThreshold:
    def test_all_ones(self):
        s = ScoreMap(np.ones((2, 2)))
        np.testing.assert_array_equal(threshold_mask(s).values, 1)

    def test_all_zeros(self):
        s = ScoreMap(np.zeros((2, 2)))
        np.testing.assert_array_equal(threshold_mask(s).values, 0)

    def test_boundary_inclusive(self):
        s = ScoreMap(np.array([[0.2, 0.5, 0.8]]))
        np.testing.assert_array_equal(threshold_mask(s, 0.5).values, [[0, 1, 1]])

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError, match="normalized"):
            threshold_mask(ScoreMap(np.array([[1.5]])))

    def test_bad_tau(self):
        with pytest.raises(ValueError, match="tau"):
            threshold_mask(ScoreMap(np.zeros((1, 1))), tau=1.5)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), t1=st.floats(0, 1), t2=st.floats(0, 1))
    def test_monotone_in_tau(self, seed, t1, t2):
        lo, hi = min(t1, t2), max(t1, t2)
        rng = np.random.default_rng(seed)
        s = ScoreMap(rng.uniform(0, 1, size=(4, 4)))
        m_lo = threshold_mask(s, lo).values
        m_hi = threshold_mask(s, hi).values
        assert (m_hi <= m_lo).all()


class TestKShot:
    def test_single_shot_rescales_to_unit_max(self):
        s = ScoreMap(np.array([[0.2, 0.4]]))
        merged = kshot_merge([s])
        np.testing.assert_allclose(merged.values, [[0.5, 1.0]])

    def test_two_shot_sum_rule(self):
        a = ScoreMap(np.array([[0.2, 0.4]]))
        b = ScoreMap(np.array([[0.6, 0.4]]))
        merged = kshot_merge([a, b])
        np.testing.assert_allclose(merged.values, [[1.0, 1.0]])

    def test_all_zero_guard(self):
        z = ScoreMap(np.zeros((2, 2)))
        merged = kshot_merge([z, z])
        np.testing.assert_array_equal(merged.values, 0.0)

    def test_max_is_one_when_any_shot_fires(self):
        rng = np.random.default_rng(8)
        preds = [ScoreMap(rng.uniform(0, 1, size=(3, 3))) for _ in range(4)]
        merged = kshot_merge(preds)
        assert merged.values.max() == pytest.approx(1.0)
        assert merged.values.min() >= 0.0

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError, match="one prediction"):
            kshot_merge([])

    def test_extent_mismatch(self):
        with pytest.raises(ValueError, match="extent"):
            kshot_merge([ScoreMap(np.zeros((2, 2))), ScoreMap(np.zeros((3, 3)))])


class TestUpsample:
    def test_block_replication(self):
        m = GridMask(np.array([[1, 0], [0, 1]], dtype=np.uint8))
        full = upsample_mask(m, 28, 28)
        assert full.shape == (28, 28)
        assert (full[:14, :14] == 1).all()
        assert (full[:14, 14:] == 0).all()
        assert (full[14:, :14] == 0).all()
        assert (full[14:, 14:] == 1).all()

    def test_identity(self):
        m = GridMask(np.array([[1, 0]], dtype=np.uint8))
        np.testing.assert_array_equal(upsample_mask(m, 1, 2), m.values)

    def test_checkerboard(self):
        cells = np.indices((2, 2)).sum(axis=0) % 2
        m = GridMask(cells.astype(np.uint8))
        full = upsample_mask(m, 28, 28)
        np.testing.assert_array_equal(full, np.kron(cells, np.ones((14, 14), dtype=np.uint8)))

    def test_too_small_target(self):
        m = GridMask(np.ones((4, 4), dtype=np.uint8))
        with pytest.raises(ValueError, match="smaller"):
            upsample_mask(m, 2, 8)


class TestSerialization:
    def test_score_map_round_trip(self, tmp_path):
        s = ScoreMap(np.array([[0.25, 0.5], [0.75, 1.0]]))
        path = tmp_path / "score.fcct"
        save_score_map(path, s)
        back = load_score_map(path)
        np.testing.assert_allclose(back.values, s.values, atol=0)

    def test_mask_pgm_bytes(self, tmp_path):
        m = GridMask(np.array([[1, 0], [0, 1]], dtype=np.uint8))
        path = tmp_path / "mask.pgm"
        mask_to_pgm(path, m)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n2 2\n255\n")
        assert raw[-4:] == bytes([255, 0, 0, 255])


def test_minmax_matches_oracle():
    rng = np.random.default_rng(9)
    raw = rng.standard_normal((5, 5))
    np.testing.assert_allclose(minmax_normalize(raw), oracle_minmax(raw), atol=0)
