"""Command-line interface: one subcommand per pipeline stage.

Every subcommand validates its flags before computing, writes its
artifacts under --out-dir, and exits 0 on success or 1 with a one-line
`error: <Type>: <message>` on stderr. With --deterministic, outputs are
byte-identical across runs and thread counts.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from fccseg import runtime
from fccseg.analysis import cka_heatmap
from fccseg.correlation import build_volume, parse_pattern, write_volume
from fccseg.episodes import (
    EpisodeBundle,
    FeatureSet,
    GridMask,
    load_episode,
    read_manifest,
    save_manifest_bundle,
)
from fccseg.evaluation import (
    PipelineConfig,
    SynthSpec,
    evaluate,
    format_summary,
    stratify_small_support,
    synth_batch,
    write_report_csv,
)
from fccseg.reduction import load_weights, weight_heatmap
from fccseg.segmentation import (
    mask_to_pgm,
    save_mask,
    save_score_map,
    score_map_to_pgm,
)
from fccseg.tensorfile import read_tensor
from fccseg.textio import to_u8, write_matrix_csv, write_pgm, write_rows_csv
from fccseg.toyhead import TrainConfig, head_channel_map, save_params, train

PATTERN_CHOICES = ("same", "cross3", "dcross3", "cross5", "full")
SCENARIO_CHOICES = ("plain", "scale_diff", "occlusion", "shape_diff", "limited_info")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--threads", type=int, default=None,
                   help="compute thread count (falls back to FCC_THREADS, then library default)")
    p.add_argument("--deterministic", action="store_true",
                   help="fixed accumulation order: byte-identical outputs across runs and thread counts")
    p.add_argument("--out-dir", type=Path, required=True, help="directory for output artifacts")


def _add_pipeline(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pattern", choices=PATTERN_CHOICES, default="full", help="layer-pair pattern")
    p.add_argument("--dual-path", action="store_true",
                   help="concatenate the full-support path to the target path")
    p.add_argument("--weights", type=str, default=None,
                   help="stem of saved reduction weights to apply before scoring")
    p.add_argument("--tau", type=float, default=0.5, help="threshold on normalized scores")
    p.add_argument("--kshot", type=int, default=None, help="number of shots to merge (default: all)")


def _add_synth(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", choices=SCENARIO_CHOICES, default="plain")
    p.add_argument("--episodes", type=int, default=50, help="episode count")
    p.add_argument("--grid-h", type=int, default=20)
    p.add_argument("--grid-w", type=int, default=20)
    p.add_argument("--n-layers", type=int, default=12)
    p.add_argument("--channels", type=int, default=24)
    p.add_argument("--signature-dim", type=int, default=18)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--scale-ratio", type=float, default=0.5)
    p.add_argument("--occlusion-fraction", type=float, default=0.25)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--shots", type=int, default=1, help="support shots per episode")


def _synth_spec(args: argparse.Namespace) -> SynthSpec:
    return SynthSpec(
        grid_h=args.grid_h,
        grid_w=args.grid_w,
        n_layers=args.n_layers,
        channels=args.channels,
        signature_dim=args.signature_dim,
        noise_sigma=args.noise_sigma,
        scenario=args.scenario,
        scale_ratio=args.scale_ratio,
        occlusion_fraction=args.occlusion_fraction,
        seed=args.seed,
    )


def _episodes_from_args(args: argparse.Namespace) -> list[EpisodeBundle]:
    if args.manifest is not None:
        manifest = read_manifest(args.manifest)
        return [load_episode(manifest, i) for i in range(len(manifest))]
    return synth_batch(_synth_spec(args), args.episodes, n_folds=args.folds, shots=args.shots)


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    weights = load_weights(args.weights) if args.weights else None
    return PipelineConfig(
        pattern=parse_pattern(args.pattern),
        dual_path=args.dual_path,
        weights=weights,
        tau=args.tau,
        k_shots=args.kshot,
    )


def _load_one_episode(args: argparse.Namespace) -> EpisodeBundle:
    manifest = read_manifest(args.manifest)
    return load_episode(manifest, args.episode)


def _out_dir(args: argparse.Namespace) -> Path:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    return args.out_dir


# Subcommands ----------------------------------------------------------------

def cmd_fcc(args: argparse.Namespace) -> int:
    episode = _load_one_episode(args)
    out = _out_dir(args)
    vol = build_volume(
        episode.query, episode.shots[0], parse_pattern(args.pattern), args.dual_path
    )
    write_volume(out / "volume.fcct", vol)
    print(f"wrote {vol.channels}-channel volume to {out / 'volume.fcct'}")
    return 0


def cmd_segment(args: argparse.Namespace) -> int:
    from fccseg.evaluation import iou, predict_episode

    episode = _load_one_episode(args)
    out = _out_dir(args)
    merged, pred = predict_episode(episode, _pipeline_config(args))
    save_score_map(out / "score.fcct", merged)
    write_matrix_csv(out / "score.csv", merged.values)
    score_map_to_pgm(out / "score.pgm", merged)
    save_mask(out / "mask.fcct", pred)
    mask_to_pgm(out / "mask.pgm", pred)
    print(f"iou {iou(pred, episode.query_gt):.9g}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    episodes = _episodes_from_args(args)
    if args.small_support_only:
        episodes = stratify_small_support(episodes)
        if not episodes:
            raise ValueError("no episodes left after the small-support stratification")
    report = evaluate(
        episodes,
        _pipeline_config(args),
        stratum="support-mask<5%" if args.small_support_only else "all",
    )
    out = _out_dir(args)
    write_report_csv(out / "report.csv", report)
    summary = format_summary(report)
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return 0


def cmd_cka(args: argparse.Namespace) -> int:
    dims_a, data_a = read_tensor(args.features_a)
    dims_b, data_b = read_tensor(args.features_b)
    if len(dims_a) != 4 or len(dims_b) != 4:
        raise ValueError("CKA expects rank-4 feature tensors [layers, C, h, w]")
    mask = None
    if args.mask is not None:
        _, mask_data = read_tensor(args.mask)
        mask = GridMask(mask_data)
    heatmap = cka_heatmap(FeatureSet(data_a), FeatureSet(data_b), mask)
    out = _out_dir(args)
    write_matrix_csv(out / "cka.csv", heatmap)
    write_pgm(out / "cka.pgm", to_u8(heatmap))
    print(f"wrote {heatmap.shape[0]}x{heatmap.shape[1]} CKA heatmap to {out / 'cka.csv'}")
    return 0


def cmd_train_toy(args: argparse.Namespace) -> int:
    episodes = _episodes_from_args(args)
    if len(episodes) < 2:
        raise ValueError("toy-head training needs at least 2 episodes (one is held out)")
    split = max(1, int(round(len(episodes) * args.heldout_fraction)))
    heldout = episodes[-split:]
    training = episodes[:-split]
    channel_map = head_channel_map(
        parse_pattern(args.pattern), episodes[0].query.n_layers, dual_path=args.dual_path
    )
    cfg = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch=args.batch,
        seed=args.seed,
        dice_mix=args.dice_mix,
    )
    result = train(training, cfg, heldout=heldout, channel_map=channel_map,
                   out_channels=args.out_channels)
    out = _out_dir(args)
    save_params(out / "toyhead", result.params)
    write_rows_csv(
        out / "train_log.csv",
        ("step", "ce", "dice", "total", "heldout_miou"),
        result.log,
    )
    print(f"best step {result.best_step}, held-out loss {result.best_heldout_loss:.9g}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    episodes = synth_batch(_synth_spec(args), args.episodes, n_folds=args.folds, shots=args.shots)
    out = _out_dir(args)
    manifest_path = save_manifest_bundle(out, episodes)
    print(f"wrote {len(episodes)} episodes to {manifest_path}")
    return 0


def cmd_weights_heatmap(args: argparse.Namespace) -> int:
    weights = load_weights(args.weights)
    target, support = weight_heatmap(weights)
    out = _out_dir(args)
    write_matrix_csv(out / "heatmap_target.csv", target)
    write_matrix_csv(out / "heatmap_support.csv", support)
    peak = max(target.max(), support.max())
    scale = peak if peak > 0 else 1.0
    write_pgm(out / "heatmap_target.pgm", to_u8(target, 0.0, scale))
    write_pgm(out / "heatmap_support.pgm", to_u8(support, 0.0, scale))
    print(f"wrote layer-pair heatmaps to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fccseg",
        description="Cross-layer correlation volumes, prior masks, and episodic evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fcc", help="compute and spill a correlation volume for one episode")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--episode", type=int, default=0, help="episode index in the manifest")
    p.add_argument("--pattern", choices=PATTERN_CHOICES, default="full")
    p.add_argument("--dual-path", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_fcc)

    p = sub.add_parser("segment", help="prior-mask pipeline on one episode")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--episode", type=int, default=0)
    _add_pipeline(p)
    _add_common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="episodic mIoU over a manifest or synthetic batch")
    p.add_argument("--manifest", type=Path, default=None,
                   help="episode manifest (omit to evaluate a synthetic batch)")
    p.add_argument("--small-support-only", action="store_true",
                   help="keep only episodes whose support mask covers under 5%% of cells")
    _add_pipeline(p)
    _add_synth(p)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cka", help="CKA layer-similarity heatmap between two feature files")
    p.add_argument("--features-a", type=Path, required=True)
    p.add_argument("--features-b", type=Path, required=True)
    p.add_argument("--mask", type=Path, default=None, help="restrict tokens to mask foreground")
    _add_common(p)
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("train-toy", help="train the toy head on a manifest or synthetic batch")
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--pattern", choices=PATTERN_CHOICES, default="full")
    p.add_argument("--dual-path", action="store_true")
    p.add_argument("--out-channels", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--dice-mix", type=float, default=0.5)
    p.add_argument("--heldout-fraction", type=float, default=0.2)
    _add_synth(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("synth", help="generate a synthetic manifest plus feature files")
    _add_synth(p)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("weights-heatmap", help="layer-pair prioritization of saved 1x1 weights")
    p.add_argument("--weights", type=str, required=True, help="stem of saved reduction weights")
    _add_common(p)
    p.set_defaults(func=cmd_weights_heatmap)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        runtime.configure(
            threads=args.threads if args.threads is not None else runtime.threads_from_env(),
            deterministic=args.deterministic,
        )
        return args.func(args)
    except Exception as exc:  # one-line, machine-parsable failure
        message = str(exc).replace("\n", "; ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
