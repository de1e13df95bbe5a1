"""Command-line entry point: invert, distill, finetune, embed, avgimage,
stylize, metric, cache inspect. Every command accepts --manifest to emit a
JSON run manifest with input/output digests and per-phase wall-clock."""

from __future__ import annotations

import argparse
import json
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import cache as cache_mod
from . import distill as distill_mod
from .embedding import (
    average_embeddings,
    extract_crops,
    finetune_adapter,
    init_projection,
    load_projection,
    mock_image_embed,
    project,
    save_projection,
)
from .fileio import digest_file, fnv1a64, read_ppm, read_ten, write_ppm, write_ten
from .metrics import chamfer_color, eval_pairs, write_scores_csv
from .model import ConditionSet, RecordingHook, ToyModel, ddim_invert, encode_image
from .pipeline import (
    BankProvider,
    DynamicProvider,
    StylizeConfig,
    decode_latent,
    generate_average_image,
    load_norm_stats,
    save_norm_stats,
    stylize_latent,
    stylize_two_stage,
)

DEFAULT_MODEL_SEED = 101


class Manifest:
    def __init__(self, command: str, config: dict):
        self.data = {
            "command": command,
            "config": {k: v for k, v in config.items() if k != "func"},
            "inputs": {},
            "outputs": {},
            "timings": {},
            "total_seconds": 0.0,
        }
        self._t0 = time.perf_counter()

    @contextmanager
    def phase(self, name: str):
        t = time.perf_counter()
        yield
        self.data["timings"][name] = self.data["timings"].get(name, 0.0) + (
            time.perf_counter() - t
        )

    def add_input(self, path):
        self.data["inputs"][str(path)] = digest_file(path)

    def add_output(self, path):
        self.data["outputs"][str(path)] = digest_file(path)

    def finish(self, path=None):
        self.data["total_seconds"] = time.perf_counter() - self._t0
        if path:
            Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True))


def _load_styles(styles_dir):
    paths = sorted(Path(styles_dir).glob("*.ppm"))
    if not paths:
        raise ValueError(f"no .ppm style images in {styles_dir}")
    return paths


def cmd_invert(args, man: Manifest) -> None:
    with man.phase("load"):
        img = read_ppm(args.image)
        man.add_input(args.image)
        model = ToyModel(args.model_seed)
    with man.phase("compute"):
        latent = encode_image(img)
        cond = ConditionSet(model.prompt_tokens(args.prompt))
        hook = RecordingHook()
        ddim_invert(model, latent, cond, args.steps, hook)
        entries = [
            cache_mod.CacheEntry(cache_mod.CacheKey(*key), K, V)
            for key, (K, V) in sorted(hook.records.items())
        ]
    with man.phase("write"):
        source_id = fnv1a64(Path(args.image).read_bytes())
        cache_mod.write_cache(entries, args.out, source_image_id=source_id)
        man.add_output(args.out)
    print(f"wrote {len(entries)} entries to {args.out}")


def cmd_distill(args, man: Manifest) -> None:
    with man.phase("load"):
        readers = [cache_mod.open_cache(p) for p in args.caches]
        for p in args.caches:
            man.add_input(p)
    with man.phase("compute"):
        bank = distill_mod.distill(
            readers,
            seed=args.seed,
            k_scale=args.k_scale,
            threads=args.threads,
            max_iters=args.kmeans_iters,
            tol=args.kmeans_tol,
        )
    with man.phase("write"):
        distill_mod.write_bank(bank, args.out)
        man.add_output(args.out)
    print(
        f"distilled {len(readers)} caches -> {args.out} "
        f"({bank.payload_bytes()} payload bytes)"
    )


def cmd_finetune(args, man: Manifest) -> None:
    with man.phase("load"):
        paths = _load_styles(args.styles)
        styles = []
        for p in paths:
            img = read_ppm(p)
            styles.append((encode_image(img), mock_image_embed(img)))
            man.add_input(p)
        model = ToyModel(args.model_seed)
        A0 = init_projection(args.seed, token_dim=model.cond_dim)
    with man.phase("compute"):
        result = finetune_adapter(
            A0, styles, model, steps=args.steps, lr=args.lr, seed=args.seed
        )
    with man.phase("write"):
        save_projection(args.out, result.weights)
        man.add_output(args.out)
    if result.losses:
        window = max(1, min(20, len(result.losses) // 2 or 1))
        first = float(np.mean(result.losses[:window]))
        last = float(np.mean(result.losses[-window:]))
        print(f"finetuned {args.steps} steps: loss {first:.4f} -> {last:.4f}")
    else:
        print("finetuned 0 steps: adapter written unchanged")


def cmd_embed(args, man: Manifest) -> None:
    with man.phase("load"):
        paths = _load_styles(args.styles)
        adapter = load_projection(args.adapter)
        man.add_input(args.adapter)
        for p in paths:
            man.add_input(p)
    with man.phase("compute"):
        token_seqs = []
        for i, p in enumerate(paths):
            img = read_ppm(p)
            if args.crop_px:
                pieces = extract_crops(
                    img, args.crop_px, args.crops_per_image, args.seed + i
                )
            else:
                pieces = [img]
            for piece in pieces:
                token_seqs.append(project(adapter, mock_image_embed(piece)))
        phi = average_embeddings(token_seqs)
    with man.phase("write"):
        write_ten(args.out, phi)
        man.add_output(args.out)
    print(f"averaged {len(token_seqs)} embeddings -> {args.out}")


def cmd_avgimage(args, man: Manifest) -> None:
    with man.phase("load"):
        phi = read_ten(args.phi)
        man.add_input(args.phi)
        model = ToyModel(args.model_seed)
    with man.phase("compute"):
        latent, norm = generate_average_image(
            model, phi, args.steps, args.seed, latent_size=(args.latent_size, args.latent_size)
        )
    with man.phase("write"):
        write_ten(args.out, latent)
        save_norm_stats(norm, args.stats)
        man.add_output(args.out)
        man.add_output(args.stats)
    print(f"average image -> {args.out}, stats -> {args.stats}")


def _load_config(args) -> StylizeConfig:
    if args.config:
        cfg = StylizeConfig.from_json(Path(args.config).read_text())
    else:
        cfg = StylizeConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.steps = args.steps
    return cfg


def cmd_stylize(args, man: Manifest) -> None:
    with man.phase("load"):
        content = read_ppm(args.content)
        man.add_input(args.content)
        phi = read_ten(args.phi)
        man.add_input(args.phi)
        norm = load_norm_stats(args.stats)
        man.add_input(args.stats)
        cfg = _load_config(args)
        if args.config:
            man.add_input(args.config)
        model = ToyModel(args.model_seed)
        if args.dynamic_caches:
            provider = DynamicProvider(
                [cache_mod.open_cache(p) for p in args.dynamic_caches]
            )
            for p in args.dynamic_caches:
                man.add_input(p)
        else:
            if not args.bank:
                raise ValueError("either --bank or --dynamic-caches is required")
            provider = BankProvider(distill_mod.open_bank(args.bank))
            man.add_input(args.bank)
    with man.phase("compute"):
        if args.two_stage:
            if args.dynamic_caches:
                raise ValueError("--two-stage requires banks, not dynamic caches")
            bank_hi = distill_mod.open_bank(args.bank)
            bank_lo = distill_mod.open_bank(args.bank_lo)
            man.add_input(args.bank_lo)
            norm_lo = load_norm_stats(args.stats_lo)
            man.add_input(args.stats_lo)
            img = stylize_two_stage(
                model, content, bank_lo, bank_hi, norm_lo, norm, phi, cfg
            )
        else:
            img = decode_latent(
                stylize_latent(model, content, provider, norm, phi, cfg)
            )
    with man.phase("write"):
        write_ppm(args.out, img)
        man.add_output(args.out)
    print(f"stylized -> {args.out}")


def cmd_metric_chamfer(args, man: Manifest) -> None:
    with man.phase("load"):
        a = read_ppm(args.a)
        b = read_ppm(args.b)
        man.add_input(args.a)
        man.add_input(args.b)
    with man.phase("compute"):
        value = chamfer_color(a, b, subsample=args.subsample or None, seed=args.seed)
    print(f"{value:.9g}")


def cmd_metric_eval(args, man: Manifest) -> None:
    with man.phase("compute"):
        scores, means = eval_pairs(
            args.stylized,
            args.styles,
            fraction=args.fraction,
            seed=args.seed,
            subsample=args.subsample or None,
            threads=args.threads,
        )
    with man.phase("write"):
        if args.csv:
            write_scores_csv(args.csv, scores, means)
            man.add_output(args.csv)
    for group, mean in means.items():
        print(f"{group}\t{mean:.9g}")


def cmd_cache_inspect(args, man: Manifest) -> None:
    man.add_input(args.path)
    with open(args.path, "rb") as f:
        magic = f.read(4)
    if magic == cache_mod.MAGIC:
        reader = cache_mod.open_cache(args.path)
        text = cache_mod.format_index(reader)
        reader.close()
    elif magic == distill_mod.BANK_MAGIC:
        text = distill_mod.format_bank_index(distill_mod.open_bank(args.path))
    else:
        raise ValueError(f"{args.path}: unknown container magic {magic!r}")
    if text:
        print(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="styledistill",
        description="Multi-image style feature distillation and injection toolkit",
    )
    parser.add_argument("--manifest", help="write a JSON run manifest to this path")
    # also accepted after the subcommand; SUPPRESS keeps a top-level value
    # from being clobbered by the subparser default
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", default=argparse.SUPPRESS)
    subparsers = parser.add_subparsers(dest="command", required=True)

    class _Sub:
        def add_parser(self, name, **kw):
            return subparsers.add_parser(name, parents=[common], **kw)

    sub = _Sub()

    p = sub.add_parser("invert", help="DDIM-invert a style image into a K/V cache")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--prompt", default="")
    p.add_argument("--model-seed", type=int, default=DEFAULT_MODEL_SEED)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("distill", help="cluster caches into a style bank")
    p.add_argument("--caches", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-scale", type=float, default=1.0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--kmeans-iters", type=int, default=50)
    p.add_argument("--kmeans-tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("finetune", help="fine-tune the projection adapter")
    p.add_argument("--styles", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--model-seed", type=int, default=DEFAULT_MODEL_SEED)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("embed", help="average projected style embeddings")
    p.add_argument("--styles", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop-px", type=int, default=0)
    p.add_argument("--crops-per-image", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("avgimage", help="generate the average style image and stats")
    p.add_argument("--phi", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latent-size", type=int, default=8)
    p.add_argument("--model-seed", type=int, default=DEFAULT_MODEL_SEED)
    p.set_defaults(func=cmd_avgimage)

    p = sub.add_parser("stylize", help="stylize a content image")
    p.add_argument("--content", required=True)
    p.add_argument("--bank")
    p.add_argument("--dynamic-caches", nargs="+")
    p.add_argument("--stats", required=True)
    p.add_argument("--phi", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--two-stage", action="store_true")
    p.add_argument("--bank-lo")
    p.add_argument("--stats-lo")
    p.add_argument("--model-seed", type=int, default=DEFAULT_MODEL_SEED)
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("metric", help="evaluation metrics")
    msub = p.add_subparsers(dest="metric_command", required=True)
    mc = msub.add_parser(
        "chamfer", parents=[common], help="chamfer color distance between two images"
    )
    mc.add_argument("a")
    mc.add_argument("b")
    mc.add_argument("--subsample", type=int, default=4096)
    mc.add_argument("--seed", type=int, default=0)
    mc.set_defaults(func=cmd_metric_chamfer)
    me = msub.add_parser("eval", parents=[common], help="pairwise evaluation over directories")
    me.add_argument("--stylized", required=True)
    me.add_argument("--styles", required=True)
    me.add_argument("--fraction", type=float, default=0.1)
    me.add_argument("--seed", type=int, default=0)
    me.add_argument("--subsample", type=int, default=4096)
    me.add_argument("--csv")
    me.add_argument("--threads", type=int, default=None)
    me.set_defaults(func=cmd_metric_eval)

    p = sub.add_parser("cache", help="cache utilities")
    csub = p.add_subparsers(dest="cache_command", required=True)
    ci = csub.add_parser("inspect", parents=[common], help="print the index of a cache or bank file")
    ci.add_argument("path")
    ci.set_defaults(func=cmd_cache_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    man = Manifest(args.command, vars(args))
    try:
        args.func(args, man)
    except Exception as exc:  # noqa: BLE001 - single CLI error surface
        print(f"error: {exc}", file=sys.stderr)
        return 1
    man.finish(args.manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
