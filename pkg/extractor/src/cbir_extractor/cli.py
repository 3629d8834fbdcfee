"""Command-line front end: `cbir-extract --manifest ... --images ... --out ...`."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .encoders import ExtractorSpec
from .errors import ExtractorError, MissingInput
from .extract import run_extraction


def _parse_size(raw: str) -> tuple[int, int]:
    try:
        height, _, width = raw.partition("x")
        return int(height), int(width)
    except ValueError:
        raise ValueError(f"--input-size expects HxW (e.g. 32x32), got {raw!r}") from None


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbir-extract",
        description="Encode the images named by a manifest into an embedding file",
    )
    parser.add_argument("--manifest", required=True, help="input manifest CSV")
    parser.add_argument("--images", required=True, help="root directory of image paths")
    parser.add_argument("--encoder", default="stub", help="registered encoder name")
    parser.add_argument("--out", required=True, help="embedding file to write")
    parser.add_argument(
        "--manifest-out",
        help="updated manifest path (default: OUT with a .manifest.csv suffix)",
    )
    parser.add_argument("--dim", type=int, default=64, help="embedding dimension")
    parser.add_argument(
        "--input-size", type=_parse_size, default=(32, 32), metavar="HxW",
        help="preprocessing size (default 32x32)",
    )
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0, help="stub projection seed")
    parser.add_argument("--device", default="cpu", help="device hint for adapters")
    parser.add_argument(
        "--loader-threads", type=int, default=1, help="parallel image loaders"
    )
    parser.add_argument(
        "--skip-unreadable", action="store_true",
        help="log unreadable images and continue instead of aborting",
    )
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        manifest = Path(args.manifest)
        if not manifest.exists():
            raise MissingInput(f"manifest {manifest} does not exist")
        images = Path(args.images)
        if not images.is_dir():
            raise MissingInput(f"image root {images} is not a directory")
        out = Path(args.out)
        manifest_out = (
            Path(args.manifest_out)
            if args.manifest_out
            else out.with_suffix(".manifest.csv")
        )
        spec = ExtractorSpec(
            encoder=args.encoder,
            input_size=args.input_size,
            dim=args.dim,
            batch_size=args.batch_size,
            seed=args.seed,
            device=args.device,
        )
        log = run_extraction(
            manifest, images, spec, out, manifest_out,
            skip_unreadable=args.skip_unreadable,
            loader_threads=args.loader_threads,
        )
    except ExtractorError as exc:
        record = {"error": {"code": exc.code, "message": str(exc)}}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        record = {"error": {"code": "invalid_input", "message": str(exc)}}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    print(
        f"wrote {out} ({log.extracted} records, dimension {args.dim}) "
        f"and {manifest_out}"
        + (f"; skipped {len(log.failures)} unreadable" if log.failures else "")
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
