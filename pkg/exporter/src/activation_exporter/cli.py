"""Command-line entry point for the activation exporter."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .export import ExportSpec, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="activation-export",
        description="Dump ResNet34 activations into the protoexplain manifest format.",
    )
    parser.add_argument("--dataset", required=True,
                        choices=["mnist", "stl10", "image-folder", "fake"])
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--checkpoint", type=Path, default=None,
                        help="fine-tuned state dict (random init when omitted)")
    parser.add_argument("--data-root", type=Path, default=Path("./data"))
    parser.add_argument("--cap-train", type=int, default=2000)
    parser.add_argument("--cap-test", type=int, default=1000)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--download", action="store_true",
                        help="let torchvision download the dataset")
    parser.add_argument("--no-images", action="store_true",
                        help="skip dumping input PNGs")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    spec = ExportSpec(
        dataset=args.dataset,
        out_dir=Path(args.out),
        checkpoint=args.checkpoint,
        data_root=args.data_root,
        cap_train=args.cap_train,
        cap_test=args.cap_test,
        batch_size=args.batch_size,
        device=args.device,
        download=args.download,
        save_images=not args.no_images,
    )
    try:
        manifest = export(spec)
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 1
    print(f"manifest written to {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
