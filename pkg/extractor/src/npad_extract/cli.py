"""npad-extract: image folders -> NPAD feature tensors + manifest."""
from __future__ import annotations

import argparse
import sys

from . import __version__
from .backbone import BACKBONES, ExtractorConfig
from .extract import extract_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="npad-extract",
        description="Extract multi-level backbone feature maps as NPAD tensors",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--images", required=True, help="image folder (MVTec-style or flat)")
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--backbone", default="wide_resnet50", choices=sorted(BACKBONES))
    parser.add_argument("--levels", default="1,2,3", help="comma-separated subset of 1,2,3")
    parser.add_argument("--resize", type=int, default=256)
    parser.add_argument("--crop", type=int, default=224)
    parser.add_argument("--shift-r", dest="shift_r", type=int, default=0)
    parser.add_argument(
        "--weights",
        default="default",
        help="'default' (pretrained), 'none' (seeded random), or a state-dict path",
    )
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--limit", type=int, help="cap images per role (smoke runs)")
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ExtractorConfig(
            backbone=args.backbone,
            levels=tuple(int(v) for v in args.levels.split(",") if v),
            resize=args.resize,
            crop=args.crop,
            shift_r=args.shift_r,
            weights=args.weights,
            device=args.device,
            seed=args.seed,
        )
        manifest = extract_dataset(
            args.images, args.out, config, limit=args.limit, batch_size=args.batch_size
        )
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"manifest written to {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
