"""fcc-extract: feature files, grid masks, and manifests from images."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from fcc_extractor.backbone import get_backbone
from fcc_extractor.extract import ExtractJob, extract, extract_masked, write_grid_mask
from fcc_extractor.manifest import build_manifest


def cmd_extract(args: argparse.Namespace) -> int:
    backbone = get_backbone(args.backbone)
    job = ExtractJob(image=args.image, out=args.out, mask=args.mask, side=args.size)
    if args.mask is not None:
        path = extract_masked(job, backbone)
    else:
        path = extract(job, backbone)
    print(f"wrote {path}")
    return 0


def cmd_grid_mask(args: argparse.Namespace) -> int:
    path = write_grid_mask(args.mask, args.out, args.size)
    print(f"wrote {path}")
    return 0


def cmd_build_manifest(args: argparse.Namespace) -> int:
    path = build_manifest(args.root, args.out)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fcc-extract",
        description="Extract 12-layer ViT-B/14 patch features into the engine's tensor format",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract features from one image (optionally masked)")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--mask", type=Path, default=None,
                   help="binary mask; multiplied into the image before the backbone")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=int, default=420, help="resize side length (multiple of 14)")
    p.add_argument("--backbone", choices=("dinov2", "toy"), default="dinov2")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("grid-mask", help="downsample a mask image to the patch grid")
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=int, default=420)
    p.set_defaults(func=cmd_grid_mask)

    p = sub.add_parser("build-manifest", help="emit a manifest for an on-disk episode layout")
    p.add_argument("--root", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_build_manifest)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        message = str(exc).replace("\n", "; ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
