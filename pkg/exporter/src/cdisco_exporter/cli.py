"""Console entry point: export a dump from a saved torch module."""
from __future__ import annotations

import argparse
import sys

import torch

from .export import ExportConfig, export, load_dataset_dir


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdisco-export",
        description="extract a cdisco activation dump from a TorchScript "
                    "model via layer hooks")
    parser.add_argument("--model", required=True,
                        help="pickled torch module (torch.save(model)); "
                             "the defining class must be importable")
    parser.add_argument("--data", required=True,
                        help="dataset directory (dataset.json + features)")
    parser.add_argument("--layer", required=True,
                        help="named module to hook")
    parser.add_argument("--classes", required=True,
                        help="comma-separated tracked class ids")
    parser.add_argument("--out", required=True)
    parser.add_argument("--subsample", type=int, default=1,
                        help="keep one sample in every N")
    parser.add_argument("--convention", default="logit",
                        choices=("logit", "probability"))
    parser.add_argument("--no-spatial", action="store_true")
    parser.add_argument("--channels-last-input", action="store_true",
                        help="dataset stores NHWC images; convert to NCHW")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        model = torch.load(args.model, map_location="cpu",
                           weights_only=False)
        features, labels, class_count = load_dataset_dir(args.data)
        if args.channels_last_input and features.ndim == 4:
            features = features.transpose(0, 3, 1, 2)
        config = ExportConfig(
            layer_name=args.layer,
            tracked_classes=tuple(int(c) for c in args.classes.split(",")),
            output_dir=args.out,
            gradient_convention=args.convention,
            subsample_rate=args.subsample,
            include_spatial=not args.no_spatial,
            labels=tuple(labels),
            class_count=class_count,
        )
        out = export(model, features, config)
    except (ValueError, OSError) as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 2
    print(f"dump written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
