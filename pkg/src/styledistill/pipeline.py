"""Stylization orchestration.

Captures normalization statistics from an average-style-image generation
pass, then runs the denoising loop with three independently toggleable
interventions: content Q/K moment alignment plus style K/V concatenation in
every self-attention (statistics route), condition tokens extended with the
averaged style embedding (adapter route), and per-step latent moment
alignment. Style K/V rows come either from an in-memory distilled bank or
streamed from per-image caches on disk (the dynamic baseline).

NormStats container ("SNRM"), little-endian:

    magic "SNRM" | version u32 | steps u32 | layers u32 | heads u32
    | qk_dim u32 | latent_channels u32 | seed u64
    per key, sorted by (layer, timestep, head): moment block for Q,
        then for K (f32 mean/var/skew/kurt arrays, u8 degenerate, u64 n)
    per step: latent moment block
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .cache import CacheKey, CacheReader, read_group
from .distill import StyleBank
from .model import (
    LATENT_CHANNELS,
    ConditionSet,
    Hook,
    ToyModel,
    ddim_sample_range,
    decode_latent,
    depth_map,
    encode_image,
    lineart_map,
)
from .stats import (
    MomentStats,
    align_moments,
    compute_moments,
    moments_block_size,
    pack_moments,
    unpack_moments,
)

NORM_MAGIC = b"SNRM"
NORM_VERSION = 1
NORM_HEADER = struct.Struct("<4sIIIIIIQ")


@dataclass
class NormStats:
    qk: dict[CacheKey, tuple[MomentStats, MomentStats]]
    latents: list[MomentStats]
    steps: int
    seed: int

    @property
    def layers(self) -> int:
        return max(k.layer for k in self.qk) + 1

    @property
    def heads(self) -> int:
        return max(k.head for k in self.qk) + 1

    @property
    def qk_dim(self) -> int:
        return next(iter(self.qk.values()))[0].n_channels


def save_norm_stats(norm: NormStats, path) -> None:
    keys = sorted(norm.qk)
    parts = [
        NORM_HEADER.pack(
            NORM_MAGIC,
            NORM_VERSION,
            norm.steps,
            norm.layers,
            norm.heads,
            norm.qk_dim,
            norm.latents[0].n_channels,
            norm.seed,
        )
    ]
    for key in keys:
        q, k = norm.qk[key]
        parts.append(pack_moments(q))
        parts.append(pack_moments(k))
    for stats in norm.latents:
        parts.append(pack_moments(stats))
    Path(path).write_bytes(b"".join(parts))


def load_norm_stats(path) -> NormStats:
    data = Path(path).read_bytes()
    magic, version, steps, layers, heads, qk_dim, latent_ch, seed = NORM_HEADER.unpack_from(
        data, 0
    )
    if magic != NORM_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != NORM_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = NORM_HEADER.size
    expected += layers * steps * heads * 2 * moments_block_size(qk_dim)
    expected += steps * moments_block_size(latent_ch)
    if len(data) < expected:
        raise ValueError(f"{path}: truncated stats file")
    offset = NORM_HEADER.size
    qk: dict[CacheKey, tuple[MomentStats, MomentStats]] = {}
    for layer in range(layers):
        for t in range(steps):
            for head in range(heads):
                q, offset = unpack_moments(data, offset, qk_dim)
                k, offset = unpack_moments(data, offset, qk_dim)
                qk[CacheKey(layer, t, head)] = (q, k)
    latents = []
    for _ in range(steps):
        stats, offset = unpack_moments(data, offset, latent_ch)
        latents.append(stats)
    return NormStats(qk, latents, steps, seed)


class MomentRecordingHook(Hook):
    """Collects Q/K channel moments per attention site and latent channel
    moments after every step."""

    def __init__(self):
        self.qk: dict[CacheKey, tuple[MomentStats, MomentStats]] = {}
        self.latents: dict[int, MomentStats] = {}

    def self_attn(self, layer, head, step_index, Q, K, V):
        self.qk[CacheKey(layer, step_index, head)] = (
            compute_moments(Q),
            compute_moments(K),
        )
        return None

    def post_step(self, step_index, x):
        tokens = x.reshape(x.shape[0], -1).T
        self.latents[step_index] = compute_moments(tokens)
        return None


def generate_average_image(
    model: ToyModel,
    phi: np.ndarray,
    steps: int,
    seed: int,
    latent_size: tuple[int, int] = (8, 8),
) -> tuple[np.ndarray, NormStats]:
    """Sample conditioned on the averaged style embedding alone, recording
    the Q/K and latent statistics the injection pass aligns against."""
    rng = np.random.default_rng(seed)
    x_T = rng.standard_normal((LATENT_CHANNELS,) + tuple(latent_size))
    hook = MomentRecordingHook()
    latents = ddim_sample_range(model, x_T, ConditionSet(np.asarray(phi)), steps, hook)
    norm = NormStats(
        hook.qk, [hook.latents[s] for s in range(steps)], steps=steps, seed=seed
    )
    return latents[-1], norm


# ---------------------------------------------------------------------------
# config


@dataclass
class StylizeConfig:
    steps: int = 10
    structure_fraction: float = 0.3
    low_res: int = 16
    high_res: int = 32
    moment_order: int = 2
    w_lineart: float = 1.0
    w_depth: float = 1.0
    inject_self: bool = True
    inject_cross: bool = True
    align_latents: bool = True
    seed: int = 0
    prompt: str = ""

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.structure_fraction <= 1.0:
            raise ValueError("structure_fraction must be in [0, 1]")
        if self.moment_order not in (2, 4):
            raise ValueError("moment_order must be 2 or 4")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StylizeConfig":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# style K/V providers


class BankProvider:
    """Distilled bank held fully in memory."""

    def __init__(self, bank: StyleBank):
        self._kv = {
            key: (e.K.astype(np.float64), e.V.astype(np.float64))
            for key, e in bank.entries.items()
        }
        self.steps = bank.steps

    def keys(self):
        return set(self._kv)

    def get(self, key: CacheKey):
        return self._kv[key]


class DynamicProvider:
    """Naive multi-image concatenation, re-streamed from disk per access."""

    def __init__(self, readers: Sequence[CacheReader]):
        self._readers = list(readers)
        keys = self._readers[0].keys()
        self.steps = max(k.timestep for k in keys) + 1
        self._keys = set(keys)

    def keys(self):
        return self._keys

    def get(self, key: CacheKey):
        K, V = read_group(self._readers, key)
        return K.astype(np.float64), V.astype(np.float64)


class InjectionHook(Hook):
    def __init__(self, provider, norm: NormStats, cfg: StylizeConfig):
        self.provider = provider
        self.norm = norm
        self.cfg = cfg

    def self_attn(self, layer, head, step_index, Q, K, V):
        if not self.cfg.inject_self:
            return None
        key = CacheKey(layer, step_index, head)
        if key not in self.norm.qk:
            raise KeyError(f"norm stats missing key {tuple(key)}")
        q_stats, k_stats = self.norm.qk[key]
        Q_hat = align_moments(Q, q_stats, self.cfg.moment_order)
        K_hat = align_moments(K, k_stats, self.cfg.moment_order)
        K_s, V_s = self.provider.get(key)
        return (
            Q_hat,
            np.concatenate([K_hat, K_s], axis=0),
            np.concatenate([V, V_s], axis=0),
        )

    def post_step(self, step_index, x):
        if not self.cfg.align_latents:
            return None
        tokens = x.reshape(x.shape[0], -1).T
        aligned = align_moments(tokens, self.norm.latents[step_index], self.cfg.moment_order)
        return aligned.T.reshape(x.shape)


def _build_condition(
    model: ToyModel, content_img: np.ndarray | None, phi: np.ndarray, cfg: StylizeConfig
) -> ConditionSet:
    tokens = model.prompt_tokens(cfg.prompt)
    if cfg.inject_cross:
        tokens = np.concatenate([tokens, np.asarray(phi, dtype=np.float64)], axis=0)
    controls = []
    if content_img is not None:
        if cfg.w_lineart > 0:
            controls.append(("lineart", lineart_map(content_img), cfg.w_lineart))
        if cfg.w_depth > 0:
            controls.append(("depth", depth_map(content_img), cfg.w_depth))
    return ConditionSet(tokens, tuple(controls))


def _check_provider(model: ToyModel, provider, norm: NormStats, cfg: StylizeConfig):
    if norm.steps != cfg.steps:
        raise ValueError(f"norm stats built for {norm.steps} steps, config has {cfg.steps}")
    if cfg.inject_self:
        if provider.steps != cfg.steps:
            raise ValueError(
                f"style source built for {provider.steps} steps, config has {cfg.steps}"
            )
        available = provider.keys()
        for layer in range(model.blocks):
            for t in range(cfg.steps):
                for head in range(model.heads):
                    key = CacheKey(layer, t, head)
                    if key not in available:
                        raise KeyError(f"style source missing key {tuple(key)}")
                    if key not in norm.qk:
                        raise KeyError(f"norm stats missing key {tuple(key)}")


def stylize_latent(
    model: ToyModel,
    content_img: np.ndarray,
    provider,
    norm: NormStats,
    phi: np.ndarray,
    cfg: StylizeConfig,
) -> np.ndarray:
    """Full-schedule stylization; returns the final latent."""
    _check_provider(model, provider, norm, cfg)
    cond = _build_condition(model, content_img, phi, cfg)
    c, height, width = encode_image(content_img).shape
    rng = np.random.default_rng(cfg.seed)
    x_T = rng.standard_normal((c, height, width))
    hook = InjectionHook(provider, norm, cfg)
    latents = ddim_sample_range(model, x_T, cond, cfg.steps, hook)
    return latents[-1]


def stylize(
    model: ToyModel,
    content_img: np.ndarray,
    bank: StyleBank,
    norm: NormStats,
    phi: np.ndarray,
    cfg: StylizeConfig,
) -> np.ndarray:
    """Stylize a content image against a distilled bank; returns an image."""
    return decode_latent(
        stylize_latent(model, content_img, BankProvider(bank), norm, phi, cfg)
    )


def run_eq7_baseline(
    model: ToyModel,
    content_img: np.ndarray,
    caches: Sequence[CacheReader],
    norm: NormStats,
    phi: np.ndarray,
    cfg: StylizeConfig,
) -> np.ndarray:
    """Stylize with the naive full concatenation streamed from disk."""
    return decode_latent(
        stylize_latent(model, content_img, DynamicProvider(caches), norm, phi, cfg)
    )


def upsample_latent(z: np.ndarray) -> np.ndarray:
    """Bilinear 2x spatial upsampling of a latent."""
    return ndimage.zoom(z, (1, 2, 2), order=1, mode="nearest", grid_mode=True)


def downscale_image(img: np.ndarray) -> np.ndarray:
    """Exact 2x2 box downscale (content image for the structure stage)."""
    c, height, width = img.shape
    return img.reshape(c, height // 2, 2, width // 2, 2).mean(axis=(2, 4))


def stylize_two_stage(
    model: ToyModel,
    content_img: np.ndarray,
    bank_lo: StyleBank,
    bank_hi: StyleBank,
    norm_lo: NormStats,
    norm_hi: NormStats,
    phi: np.ndarray,
    cfg: StylizeConfig,
) -> np.ndarray:
    """Structure at low resolution for the first ceil(f * steps) steps, then
    latent-upsample and finish at high resolution with control maps
    recomputed from the full-size content image."""
    c, height, width = content_img.shape
    if (height, width) != (cfg.high_res, cfg.high_res):
        raise ValueError(
            f"content must be {cfg.high_res}px for the two-stage schedule, got {height}x{width}"
        )
    if cfg.high_res != 2 * cfg.low_res:
        raise ValueError("high_res must be exactly 2x low_res")
    m = math.ceil(cfg.structure_fraction * cfg.steps)
    if m == 0:
        return decode_latent(
            stylize_latent(model, content_img, BankProvider(bank_hi), norm_hi, phi, cfg)
        )
    content_lo = downscale_image(content_img)
    provider_lo = BankProvider(bank_lo)
    _check_provider(model, provider_lo, norm_lo, cfg)
    cond_lo = _build_condition(model, content_lo, phi, cfg)
    rng = np.random.default_rng(cfg.seed)
    lat = encode_image(content_lo).shape
    x = rng.standard_normal(lat)
    hook_lo = InjectionHook(provider_lo, norm_lo, cfg)
    x = ddim_sample_range(model, x, cond_lo, cfg.steps, hook_lo, start=0, stop=m)[-1]
    x = upsample_latent(x)
    if m == cfg.steps:
        return decode_latent(x)
    provider_hi = BankProvider(bank_hi)
    _check_provider(model, provider_hi, norm_hi, cfg)
    cond_hi = _build_condition(model, content_img, phi, cfg)
    hook_hi = InjectionHook(provider_hi, norm_hi, cfg)
    x = ddim_sample_range(model, x, cond_hi, cfg.steps, hook_hi, start=m, stop=cfg.steps)[-1]
    return decode_latent(x)
