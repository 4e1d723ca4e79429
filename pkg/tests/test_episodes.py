import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fccseg.episodes import (
    EpisodeBundle,
    EpisodeManifest,
    EpisodeRecord,
    FeatureSet,
    GridMask,
    ManifestError,
    Shot,
    ShotRecord,
    downsample_mask,
    load_episode,
    read_manifest,
    save_manifest_bundle,
    write_manifest,
)
from fccseg.tensorfile import write_tensor


def make_features(n_layers=2, channels=3, grid=(4, 4), seed=0):
    rng = np.random.default_rng(seed)
    return FeatureSet(rng.standard_normal((n_layers, channels, *grid)).astype(np.float32))


def make_bundle(n_layers=2, channels=3, grid=(4, 4), shots=1):
    gt = np.zeros(grid, dtype=np.uint8)
    gt[1:3, 1:3] = 1
    shot_list = tuple(
        Shot(
            support_full=make_features(n_layers, channels, grid, seed=10 + k),
            support_target=make_features(n_layers, channels, grid, seed=20 + k),
            support_mask=GridMask(gt),
        )
        for k in range(shots)
    )
    return EpisodeBundle(
        query=make_features(n_layers, channels, grid, seed=1),
        query_gt=GridMask(gt),
        shots=shot_list,
        class_id="toy",
        fold_id=0,
    )


class TestTypes:
    def test_feature_set_shape_accessors(self):
        fs = make_features(5, 7, (3, 4))
        assert (fs.n_layers, fs.channels, fs.grid_h, fs.grid_w) == (5, 7, 3, 4)

    def test_feature_set_rejects_nan(self):
        data = np.zeros((1, 2, 2, 2), dtype=np.float32)
        data[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            FeatureSet(data)

    def test_feature_set_immutable(self):
        fs = make_features()
        with pytest.raises(ValueError):
            fs.data[0, 0, 0, 0] = 1.0

    def test_mask_rejects_non_binary(self):
        with pytest.raises(ValueError, match="binary"):
            GridMask(np.array([[0, 2]], dtype=np.uint8))

    def test_bundle_requires_one_shot(self):
        base = make_bundle()
        with pytest.raises(ValueError, match="shot"):
            EpisodeBundle(query=base.query, query_gt=base.query_gt, shots=())

    def test_bundle_rejects_layer_mismatch(self):
        base = make_bundle()
        bad = Shot(
            support_full=make_features(n_layers=3),
            support_target=make_features(n_layers=3),
            support_mask=base.shots[0].support_mask,
        )
        with pytest.raises(ValueError, match="n_layers"):
            EpisodeBundle(query=base.query, query_gt=base.query_gt, shots=(bad,))


class TestDownsample:
    def test_all_ones(self):
        mask = np.ones((28, 28), dtype=np.uint8)
        np.testing.assert_array_equal(downsample_mask(mask, 2, 2).values, np.ones((2, 2), np.uint8))

    def test_all_zeros(self):
        mask = np.zeros((28, 28), dtype=np.uint8)
        np.testing.assert_array_equal(downsample_mask(mask, 2, 2).values, np.zeros((2, 2), np.uint8))

    def test_tie_at_half_is_foreground(self):
        # 98 of 196 pixels set -> coverage exactly 0.5 -> cell 1
        patch = np.zeros((14, 14), dtype=np.uint8)
        patch.flat[:98] = 1
        assert patch.sum() == 98
        assert downsample_mask(patch, 1, 1).values[0, 0] == 1

    def test_just_below_half_is_background(self):
        patch = np.zeros((14, 14), dtype=np.uint8)
        patch.flat[:97] = 1
        assert downsample_mask(patch, 1, 1).values[0, 0] == 0

    def test_per_patch_constant_is_exact(self):
        rng = np.random.default_rng(3)
        cells = rng.integers(0, 2, size=(3, 5)).astype(np.uint8)
        full = np.kron(cells, np.ones((14, 14), dtype=np.uint8))
        np.testing.assert_array_equal(downsample_mask(full, 3, 5).values, cells)

    def test_oracle_per_patch_counting(self):
        # independent oracle: count pixels per patch by direct slicing
        rng = np.random.default_rng(11)
        full = rng.integers(0, 2, size=(42, 28)).astype(np.uint8)
        got = downsample_mask(full, 3, 2).values
        for r in range(3):
            for c in range(2):
                block = full[r * 14 : (r + 1) * 14, c * 14 : (c + 1) * 14]
                assert got[r, c] == (1 if block.mean() >= 0.5 else 0)

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError, match="binary"):
            downsample_mask(np.full((4, 4), 3, dtype=np.uint8), 2, 2)

    def test_rejects_zero_grid(self):
        with pytest.raises(ValueError, match="grid"):
            downsample_mask(np.ones((4, 4), dtype=np.uint8), 0, 2)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_monotone_in_foreground(self, seed):
        rng = np.random.default_rng(seed)
        base = rng.integers(0, 2, size=(28, 28)).astype(np.uint8)
        grown = base.copy()
        zeros = np.flatnonzero(grown == 0)
        if zeros.size:
            grown.flat[zeros[rng.integers(0, zeros.size)]] = 1
        low = downsample_mask(base, 2, 2).values
        high = downsample_mask(grown, 2, 2).values
        assert (high >= low).all()


class TestManifest:
    def test_round_trip_and_load(self, tmp_path):
        bundle = make_bundle(shots=2)
        manifest_path = save_manifest_bundle(tmp_path, [bundle])
        manifest = read_manifest(manifest_path)
        assert len(manifest) == 1
        loaded = load_episode(manifest, 0)
        assert loaded.n_shots == 2
        np.testing.assert_array_equal(loaded.query.data, bundle.query.data)
        np.testing.assert_array_equal(loaded.query_gt.values, bundle.query_gt.values)
        np.testing.assert_array_equal(loaded.shots[1].support_target.data, bundle.shots[1].support_target.data)
        assert loaded.class_id == "toy"

    def test_layer_count_mismatch(self, tmp_path):
        bundle = make_bundle()
        manifest_path = save_manifest_bundle(tmp_path, [bundle])
        # overwrite the support features with an 11-layer stack
        manifest = read_manifest(manifest_path)
        bad = make_features(n_layers=3)
        write_tensor(tmp_path / manifest.episodes[0].shots[0].support_features, bad.data.shape, bad.data)
        with pytest.raises(ManifestError, match="n_layers"):
            load_episode(manifest, 0)

    def test_zero_shots_rejected(self, tmp_path):
        record = EpisodeRecord(query_features="q.fcct", query_mask="m.fcct", shots=())
        manifest = EpisodeManifest(
            n_layers=2, channels=3, grid_h=4, grid_w=4, episodes=(record,), base_dir=tmp_path
        )
        with pytest.raises(ManifestError, match="shot"):
            load_episode(manifest, 0)

    def test_missing_file(self, tmp_path):
        record = EpisodeRecord(
            query_features="missing.fcct",
            query_mask="m.fcct",
            shots=(ShotRecord("a.fcct", "b.fcct", "c.fcct"),),
        )
        manifest = EpisodeManifest(
            n_layers=2, channels=3, grid_h=4, grid_w=4, episodes=(record,), base_dir=tmp_path
        )
        with pytest.raises(FileNotFoundError):
            load_episode(manifest, 0)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ManifestError, match="JSON"):
            read_manifest(path)

    def test_corrupted_mask_values(self, tmp_path):
        bundle = make_bundle()
        manifest_path = save_manifest_bundle(tmp_path, [bundle])
        manifest = read_manifest(manifest_path)
        bad = np.full((4, 4), 9, dtype=np.uint8)
        write_tensor(tmp_path / manifest.episodes[0].query_mask, bad.shape, bad)
        with pytest.raises(ManifestError, match="binary"):
            load_episode(manifest, 0)

    def test_fuzzed_corruption_never_yields_invalid_bundle(self, tmp_path):
        # any corruption must surface as an error, never as a bundle that
        # violates the type invariants
        rng = np.random.default_rng(99)
        for trial in range(15):
            root = tmp_path / f"trial{trial}"
            root.mkdir()
            manifest_path = save_manifest_bundle(root, [make_bundle(shots=2)])
            manifest = read_manifest(manifest_path)
            record = manifest.episodes[0]
            victim = root / rng.choice(
                [
                    record.query_features,
                    record.query_mask,
                    record.shots[0].support_features,
                    record.shots[1].support_mask,
                ]
            )
            mode = rng.integers(0, 4)
            if mode == 0:
                victim.unlink()
            elif mode == 1:
                raw = victim.read_bytes()
                victim.write_bytes(raw[: max(8, len(raw) // 2)])
            elif mode == 2:
                bad = make_features(n_layers=5, channels=2, grid=(3, 3))
                write_tensor(victim, bad.data.shape, bad.data)
            else:
                junk = np.full((4, 4), 7, dtype=np.uint8)
                write_tensor(victim, junk.shape, junk)
            with pytest.raises(Exception) as exc:
                bundle = load_episode(manifest, 0)
                # if loading somehow succeeded, the invariants must hold
                assert bundle.query.n_layers == bundle.shots[0].support_full.n_layers
            assert exc.type is not AssertionError

    def test_write_read_manifest_fields(self, tmp_path):
        record = EpisodeRecord(
            query_features="q.fcct",
            query_mask="m.fcct",
            shots=(ShotRecord("s.fcct", "t.fcct", "k.fcct"),),
            class_id="cat",
            fold_id=3,
        )
        manifest = EpisodeManifest(
            n_layers=12, channels=768, grid_h=30, grid_w=30, episodes=(record,), base_dir=tmp_path
        )
        path = tmp_path / "manifest.json"
        write_manifest(path, manifest)
        back = read_manifest(path)
        assert back.n_layers == 12 and back.channels == 768
        assert back.episodes[0].class_id == "cat"
        assert back.episodes[0].fold_id == 3
