"""Extraction jobs: DDIM-invert style images on a torch runtime and export
attention K/V caches plus image embeddings in the engine's formats."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .formats import write_skvc, write_ten
from .runtime import TorchRuntime, load_runtime


@dataclass
class ExtractionJob:
    model: str
    images: list
    out_dir: Path
    steps: int = 50
    layers: list[int] | None = None
    heads: list[int] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.images:
            raise ValueError("at least one image required")
        self.out_dir = Path(self.out_dir)


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            elif data[pos : pos + 1].isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        return data[start:pos]

    if token() != b"P6":
        raise ValueError(f"not a P6 PPM: {path}")
    width, height, maxval = int(token()), int(token()), int(token())
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    pos += 1
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    if pixels.size != width * height * 3:
        raise ValueError(f"truncated PPM: {path}")
    return pixels.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float32) / 255.0


def _fnv64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class _Capture:
    def __init__(self, layers, heads):
        self.layers = layers
        self.heads = heads
        self.records: dict[tuple[int, int, int], tuple[np.ndarray, np.ndarray]] = {}

    def __call__(self, layer, step_index, head, K: torch.Tensor, V: torch.Tensor):
        if self.layers is not None and layer not in self.layers:
            return
        if self.heads is not None and head not in self.heads:
            return
        self.records[(layer, step_index, head)] = (
            K.detach().cpu().numpy().astype(np.float32),
            V.detach().cpu().numpy().astype(np.float32),
        )


def extract_cache(job: ExtractionJob, runtime: TorchRuntime | None = None) -> list[Path]:
    """One SKVC file per style image. Partial outputs are removed when the
    job aborts."""
    runtime = runtime or load_runtime(job.model)
    job.out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    try:
        for image_path in job.images:
            img = read_ppm(image_path)
            latent = runtime.unet.encode(torch.from_numpy(img))
            capture = _Capture(job.layers, job.heads)
            runtime.ddim_invert(latent, job.steps, capture)
            if not capture.records:
                raise ValueError("layer/head filter selected no attention sites")
            out = job.out_dir / (Path(image_path).stem + ".skvc")
            source_id = _fnv64(Path(image_path).read_bytes())
            payload = write_skvc(capture.records, out, source_image_id=source_id)
            written.append(out)
            sample = next(iter(capture.records.values()))[0]
            full_sites = runtime.n_layers * runtime.n_heads * job.steps
            full_bytes = full_sites * 2 * sample.size * 4
            print(
                f"{out}: {len(capture.records)} sites, {payload} payload bytes "
                f"(full {runtime.n_layers}x{runtime.n_heads}x{job.steps} dump would be "
                f"{full_bytes} bytes per image)"
            )
    except Exception:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return written


def extract_embeddings(images, out_dir, seed: int = 0) -> list[Path]:
    """Unit-normalized image embeddings in ".ten" format, from the CLIP
    vision architecture (config-initialized; checkpoints need network)."""
    from transformers import CLIPVisionConfig, CLIPVisionModel

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not images:
        raise ValueError("at least one image required")
    config = CLIPVisionConfig(
        hidden_size=64,
        intermediate_size=128,
        num_attention_heads=4,
        num_hidden_layers=2,
        image_size=32,
        patch_size=8,
    )
    torch.manual_seed(seed)
    clip = CLIPVisionModel(config)
    clip.eval()
    written = []
    with torch.no_grad():
        for image_path in images:
            img = torch.from_numpy(read_ppm(image_path)).unsqueeze(0)
            img = torch.nn.functional.interpolate(
                img, size=(config.image_size, config.image_size),
                mode="bilinear", align_corners=False,
            )
            pooled = clip(pixel_values=img).pooler_output.squeeze(0)
            vec = pooled / pooled.norm()
            out = out_dir / (Path(image_path).stem + ".ten")
            write_ten(out, vec.numpy())
            written.append(out)
    return written
