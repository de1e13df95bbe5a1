"""Bridge CLI: extract attention caches and embeddings from a runtime."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .extract import ExtractionJob, extract_cache, extract_embeddings
from .runtime import load_runtime


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sdbridge")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="DDIM-invert images and export SKVC caches + embeddings")
    p.add_argument("--model", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", help="comma-separated layer indices to keep")
    p.add_argument("--heads", help="comma-separated head indices to keep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-embeddings", action="store_true")
    args = parser.parse_args(argv)

    try:
        job = ExtractionJob(
            model=args.model,
            images=args.images,
            out_dir=Path(args.out),
            steps=args.steps,
            layers=[int(x) for x in args.layers.split(",")] if args.layers else None,
            heads=[int(x) for x in args.heads.split(",")] if args.heads else None,
            seed=args.seed,
        )
        runtime = load_runtime(args.model)
        caches = extract_cache(job, runtime)
        embeddings = []
        if not args.no_embeddings:
            embeddings = extract_embeddings(args.images, args.out, seed=args.seed)
    except Exception as exc:  # noqa: BLE001 - single CLI error surface
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(caches)} caches, {len(embeddings)} embeddings to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
