import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fccseg.correlation import build_volume
from fccseg.episodes import EpisodeBundle, FeatureSet, GridMask, Shot
from fccseg.evaluation import (
    EvalReport,
    PipelineConfig,
    SynthSpec,
    SynthesisError,
    evaluate,
    format_summary,
    iou,
    predict_episode,
    stratify_small_support,
    synth_batch,
    synth_episode,
    write_report_csv,
)
from fccseg.segmentation import prior_score, prior_score_streamed

from .oracles import naive_iou


def mask_of(count, grid=(20, 20)):
    values = np.zeros(grid, dtype=np.uint8)
    values.reshape(-1)[:count] = 1
    return GridMask(values)


def episode_with_support_count(count, grid=(20, 20)):
    rng = np.random.default_rng(count)
    fs = lambda seed: FeatureSet(rng.standard_normal((2, 4, *grid)).astype(np.float32))
    gt = mask_of(30, grid)
    return EpisodeBundle(
        query=fs(0),
        query_gt=gt,
        shots=(Shot(support_full=fs(1), support_target=fs(2), support_mask=mask_of(count, grid)),),
    )


class TestIoU:
    def test_identity(self):
        m = mask_of(5, (4, 4))
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((2, 2), dtype=np.uint8)
        b = np.zeros((2, 2), dtype=np.uint8)
        a[0, 0] = 1
        b[1, 1] = 1
        assert iou(GridMask(a), GridMask(b)) == 0.0

    def test_two_fifths(self):
        pred = np.zeros((3, 3), dtype=np.uint8)
        gt = np.zeros((3, 3), dtype=np.uint8)
        pred.reshape(-1)[:3] = 1
        gt.reshape(-1)[1:5] = 1
        assert iou(GridMask(pred), GridMask(gt)) == pytest.approx(0.4)

    def test_both_empty(self):
        z = GridMask(np.zeros((2, 2), dtype=np.uint8))
        assert iou(z, z) == 1.0

    def test_extent_mismatch(self):
        with pytest.raises(ValueError, match="extent"):
            iou(GridMask(np.zeros((2, 2), dtype=np.uint8)), GridMask(np.zeros((3, 3), dtype=np.uint8)))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_symmetric_and_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = GridMask(rng.integers(0, 2, size=(5, 5)).astype(np.uint8))
        b = GridMask(rng.integers(0, 2, size=(5, 5)).astype(np.uint8))
        assert iou(a, b) == iou(b, a)
        assert iou(a, b) == pytest.approx(naive_iou(a.values, b.values))


class TestReport:
    def test_overall_is_mean(self):
        report = EvalReport(per_episode=(("0", 0, 0.4), ("1", 1, 0.8)))
        assert report.overall_miou == pytest.approx(0.6)

    def test_single_episode(self):
        report = EvalReport(per_episode=(("0", 2, 0.7),))
        assert report.overall_miou == pytest.approx(0.7)
        assert report.per_fold == {2: pytest.approx(0.7)}

    def test_miou_within_min_max(self):
        values = [0.1, 0.5, 0.9, 0.3]
        report = EvalReport(per_episode=tuple((str(i), i % 2, v) for i, v in enumerate(values)))
        assert min(values) <= report.overall_miou <= max(values)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match="IoU"):
            EvalReport(per_episode=(("0", 0, 1.5),))

    def test_csv_and_summary(self, tmp_path):
        report = EvalReport(per_episode=(("0", 0, 0.25), ("1", 1, 0.75)))
        path = tmp_path / "report.csv"
        write_report_csv(path, report)
        lines = path.read_text().splitlines()
        assert lines[0] == "episode_id,fold,iou"
        assert lines[1] == "0,0,0.25"
        summary = format_summary(report)
        assert "fold0" in summary and "mIoU" in summary and "0.5" in summary


class TestSynth:
    def test_bitwise_determinism(self):
        spec = SynthSpec(seed=12)
        a = synth_episode(spec)
        b = synth_episode(spec)
        assert (a.query.data == b.query.data).all()
        assert (a.shots[0].support_full.data == b.shots[0].support_full.data).all()
        assert (a.shots[0].support_target.data == b.shots[0].support_target.data).all()
        assert (a.query_gt.values == b.query_gt.values).all()

    def test_target_is_full_with_background_zeroed(self):
        ep = synth_episode(SynthSpec(seed=3, scenario="occlusion"))
        shot = ep.shots[0]
        fg = shot.support_mask.values.astype(bool)
        np.testing.assert_array_equal(
            shot.support_target.data[:, :, fg], shot.support_full.data[:, :, fg]
        )
        assert (shot.support_target.data[:, :, ~fg] == 0).all()

    def test_unit_signatures_and_orthogonal_background(self):
        ep = synth_episode(SynthSpec(seed=4, noise_sigma=0.0))
        query = ep.query.data.astype(np.float64)
        gt = ep.query_gt.values.astype(bool)
        fg_vec = query[:, :, gt][:, :, 0]         # [n_layers, C]
        bg_vec = query[:, :, ~gt][:, :, 0]
        np.testing.assert_allclose(np.linalg.norm(fg_vec, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(bg_vec, axis=1), 1.0, atol=1e-6)
        # every fg signature orthogonal to every bg signature, across layers
        np.testing.assert_allclose(fg_vec @ bg_vec.T, 0.0, atol=1e-7)

    def test_noiseless_plain_pipeline_recovers_exactly(self):
        for seed in range(4):
            ep = synth_episode(SynthSpec(seed=seed, noise_sigma=0.0))
            _, pred = predict_episode(ep, PipelineConfig())
            assert iou(pred, ep.query_gt) == 1.0

    def test_limited_info_under_five_percent(self):
        for ep in synth_batch(SynthSpec(scenario="limited_info", seed=5), 20):
            assert ep.shots[0].support_mask.foreground_fraction() < 0.05

    def test_occlusion_removes_mask_and_zeroes_features(self):
        spec = SynthSpec(scenario="occlusion", seed=6, noise_sigma=0.0, occlusion_fraction=0.4)
        plain = synth_episode(SynthSpec(scenario="plain", seed=6, noise_sigma=0.0))
        ep = synth_episode(spec)
        assert ep.shots[0].support_mask.foreground_count() < plain.shots[0].support_mask.foreground_count()

    def test_scenarios_all_produce_valid_bundles(self):
        for scenario in ("plain", "scale_diff", "occlusion", "shape_diff", "limited_info"):
            ep = synth_episode(SynthSpec(scenario=scenario, seed=7))
            assert ep.n_shots == 1
            assert ep.query_gt.foreground_count() >= 1
            assert ep.shots[0].support_mask.foreground_count() >= 1

    def test_multi_shot_shares_class_signature(self):
        ep = synth_episode(SynthSpec(seed=8, noise_sigma=0.0), shots=3)
        assert ep.n_shots == 3
        sigs = []
        for shot in ep.shots:
            fg = shot.support_mask.values.astype(bool)
            sigs.append(shot.support_target.data[:, :, fg][:, :, 0])
        np.testing.assert_allclose(sigs[0], sigs[1], atol=1e-6)
        np.testing.assert_allclose(sigs[0], sigs[2], atol=1e-6)

    def test_infeasible_specs_rejected(self):
        with pytest.raises(SynthesisError, match="scenario"):
            SynthSpec(scenario="nope")
        with pytest.raises(SynthesisError, match="signature_dim"):
            SynthSpec(signature_dim=3)
        with pytest.raises(SynthesisError, match="occlusion_fraction"):
            SynthSpec(occlusion_fraction=1.0)
        with pytest.raises(SynthesisError, match="signature_dim"):
            # 12 layers + shift + 1 frame vectors exceed a 10-dim block
            synth_episode(SynthSpec(signature_dim=10, channels=12))
        with pytest.raises(SynthesisError, match="shift"):
            synth_episode(SynthSpec(scenario="scale_diff", scale_ratio=0.01))


class TestEvaluate:
    def test_perfect_batch_gives_one(self):
        batch = synth_batch(SynthSpec(noise_sigma=0.0, seed=9), 6)
        report = evaluate(batch, PipelineConfig())
        assert report.overall_miou == 1.0
        assert report.episode_count == 6

    def test_single_episode_report_equals_its_iou(self):
        ep = synth_episode(SynthSpec(seed=10))
        cfg = PipelineConfig()
        _, pred = predict_episode(ep, cfg)
        report = evaluate([ep], cfg)
        assert report.overall_miou == pytest.approx(iou(pred, ep.query_gt))

    def test_kshot_one_equals_direct_prediction(self):
        ep = synth_episode(SynthSpec(seed=11), shots=3)
        cfg_k1 = PipelineConfig(k_shots=1)
        merged, pred = predict_episode(ep, cfg_k1)
        single = EpisodeBundle(
            query=ep.query, query_gt=ep.query_gt, shots=ep.shots[:1], fold_id=ep.fold_id
        )
        merged_direct, pred_direct = predict_episode(single, PipelineConfig())
        np.testing.assert_array_equal(pred.values, pred_direct.values)
        np.testing.assert_allclose(merged.values, merged_direct.values, atol=0)

    def test_fold_grouping(self):
        batch = synth_batch(SynthSpec(noise_sigma=0.0, seed=12), 8, n_folds=4)
        report = evaluate(batch, PipelineConfig())
        assert sorted(report.per_fold) == [0, 1, 2, 3]

    def test_every_pattern_runs_end_to_end(self):
        batch = synth_batch(SynthSpec(seed=14), 2)
        for pattern in ("same_layer", "cross3", "cross5", "dilated_cross3", "fully_cross"):
            for dual in (False, True):
                report = evaluate(batch, PipelineConfig(pattern=pattern, dual_path=dual))
                assert 0.0 <= report.overall_miou <= 1.0

    def test_streamed_prior_matches_materialized(self):
        ep = synth_episode(SynthSpec(seed=13))
        shot = ep.shots[0]
        vol = build_volume(ep.query, shot, "cross3", dual_path=True)
        direct = prior_score(vol, shot.support_mask)
        streamed = prior_score_streamed(iter(vol.data), shot.support_mask)
        np.testing.assert_allclose(streamed.values, direct.values, atol=1e-9)


class TestStratify:
    def test_boundary_19_of_400_kept(self):
        ep = episode_with_support_count(19)
        assert stratify_small_support([ep]) == [ep]

    def test_boundary_20_of_400_dropped(self):
        ep = episode_with_support_count(20)
        assert stratify_small_support([ep]) == []

    def test_empty_input(self):
        assert stratify_small_support([]) == []
