"""Image-prompt adaptation: deterministic mock image embedder, affine
projection to 4 condition tokens, embedding interpolation, crop extraction,
and projection fine-tuning against the frozen backbone.

The mock embedder stands in for a pretrained image encoder: it is
deterministic, content-sensitive and unit-normalized, which is the full
contract the pipeline relies on. Real embeddings can be dropped into the
same ".ten" container by the extraction bridge.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (
    ConditionSet,
    ToyModel,
    denoise_tokens,
    level_u,
    schedule_levels,
    token_gradient,
)

EMBED_DIM = 32
_EMBED_SEED = 0x5EED01
ADAPTER_MAGIC = b"ADP1"


def _embed_projection():
    rng = np.random.default_rng(_EMBED_SEED)
    return rng.standard_normal((33, EMBED_DIM)) / math.sqrt(33)


_EMBED_W = _embed_projection()


def mock_image_embed(img: np.ndarray) -> np.ndarray:
    """Deterministic unit-norm embedding from channel and 3x3 block stats."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError("image must be (3, H, W)")
    feats = [a.mean(axis=(1, 2)), a.var(axis=(1, 2))]
    for rows in np.array_split(a, 3, axis=1):
        for block in np.array_split(rows, 3, axis=2):
            feats.append(block.mean(axis=(1, 2)))
    v = np.concatenate(feats) @ _EMBED_W
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("degenerate image embedding")
    return v / norm


@dataclass
class ProjectionWeights:
    W: np.ndarray  # (4 * token_dim, embed_dim)
    b: np.ndarray  # (4 * token_dim,)

    @property
    def embed_dim(self) -> int:
        return self.W.shape[1]

    @property
    def token_dim(self) -> int:
        return self.W.shape[0] // 4

    def copy(self) -> "ProjectionWeights":
        return ProjectionWeights(self.W.copy(), self.b.copy())


def init_projection(seed: int, embed_dim: int = EMBED_DIM, token_dim: int = 16) -> ProjectionWeights:
    # unit-magnitude token init: embeddings are unit-norm, so W entry std
    # 0.7 puts the projected tokens on the scale of the prompt tokens
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((4 * token_dim, embed_dim)) * 0.7
    b = rng.standard_normal(4 * token_dim) * 0.4
    return ProjectionWeights(W, b)


def project(A: ProjectionWeights, e: np.ndarray) -> np.ndarray:
    """Map an image embedding to a (4, token_dim) token sequence."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (A.embed_dim,):
        raise ValueError(f"embedding must have shape ({A.embed_dim},)")
    return (A.W @ e + A.b).reshape(4, A.token_dim)


def average_embeddings(tokens_list) -> np.ndarray:
    """Elementwise mean of token sequences (the shared-style interpolation)."""
    tokens_list = list(tokens_list)
    if not tokens_list:
        raise ValueError("empty embedding list")
    stack = np.stack([np.asarray(t, dtype=np.float64) for t in tokens_list])
    return stack.mean(axis=0)


def extract_crops(img: np.ndarray, crop_px: int, n_crops: int, seed: int) -> list[np.ndarray]:
    a = np.asarray(img)
    height, width = a.shape[1], a.shape[2]
    if crop_px > min(height, width):
        raise ValueError(f"crop {crop_px}px exceeds image size {height}x{width}")
    rng = np.random.default_rng(seed)
    crops = []
    for _ in range(n_crops):
        top = int(rng.integers(0, height - crop_px + 1))
        left = int(rng.integers(0, width - crop_px + 1))
        crops.append(a[:, top : top + crop_px, left : left + crop_px].copy())
    return crops


def save_projection(path, A: ProjectionWeights) -> None:
    with open(path, "wb") as f:
        f.write(ADAPTER_MAGIC)
        f.write(struct.pack("<II", A.embed_dim, A.token_dim))
        f.write(np.ascontiguousarray(A.W, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(A.b, dtype="<f4").tobytes())


def load_projection(path) -> ProjectionWeights:
    data = Path(path).read_bytes()
    if data[:4] != ADAPTER_MAGIC:
        raise ValueError(f"not an adapter file: {path}")
    embed_dim, token_dim = struct.unpack_from("<II", data, 4)
    n_w = 4 * token_dim * embed_dim
    off = 12
    W = np.frombuffer(data, dtype="<f4", count=n_w, offset=off).astype(np.float64)
    off += 4 * n_w
    b = np.frombuffer(data, dtype="<f4", count=4 * token_dim, offset=off).astype(np.float64)
    return ProjectionWeights(W.reshape(4 * token_dim, embed_dim), b)


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneResult:
    weights: ProjectionWeights
    losses: list[float]


def adapter_loss_and_grad(
    model: ToyModel,
    A: ProjectionWeights,
    x0: np.ndarray,
    embedding: np.ndarray,
    u: float,
    abar_u: float,
    noise: np.ndarray,
    base_tokens: np.ndarray,
    with_grad: bool = True,
):
    """Reconstruction loss ||eps - eps_hat||^2 for one (image, t, noise) draw
    and its gradient w.r.t. the projection parameters."""
    x_t = math.sqrt(abar_u) * x0 + math.sqrt(1.0 - abar_u) * noise
    c = x_t.shape[0]
    x_tokens = x_t.reshape(c, -1).T
    noise_tokens = noise.reshape(c, -1).T
    phi = project(A, embedding)
    cond = ConditionSet(np.concatenate([base_tokens, phi], axis=0))
    tape: list | None = [] if with_grad else None
    eps = denoise_tokens(model, x_tokens, u, cond, tape=tape)
    resid = eps - noise_tokens
    loss = float((resid * resid).sum())
    if not with_grad:
        return loss, None, None
    d_tokens = token_gradient(model, tape, 2.0 * resid)
    d_phi = d_tokens[base_tokens.shape[0] :].reshape(-1)
    dW = np.outer(d_phi, embedding)
    db = d_phi
    return loss, dW, db


def finetune_adapter(
    A0: ProjectionWeights,
    styles: list[tuple[np.ndarray, np.ndarray]],
    model: ToyModel,
    steps: int = 100,
    lr: float = 1e-2,
    seed: int = 0,
    schedule_steps: int = 10,
    prompt: str = "",
) -> FinetuneResult:
    """Gradient descent on the projection only; the backbone stays frozen.

    `styles` pairs each style latent with its image embedding. Per step one
    style, one schedule level and one noise draw are sampled from the seeded
    generator; the learning rate follows a cosine decay.
    """
    if not styles:
        raise ValueError("at least one style image required")
    A = A0.copy()
    rng = np.random.default_rng(seed)
    abar = schedule_levels(schedule_steps)
    base_tokens = model.prompt_tokens(prompt)
    losses: list[float] = []
    for s in range(steps):
        i = int(rng.integers(len(styles)))
        j = int(rng.integers(1, schedule_steps + 1))
        x0, e = styles[i]
        noise = rng.standard_normal(x0.shape)
        u = level_u(schedule_steps, j)
        loss, dW, db = adapter_loss_and_grad(
            model, A, x0, e, u, float(abar[j]), noise, base_tokens
        )
        if not np.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss at step {s} (style {i}, level {j}): {loss}"
            )
        lr_s = lr * 0.5 * (1.0 + math.cos(math.pi * s / steps))
        A.W -= lr_s * dW
        A.b -= lr_s * db
        losses.append(loss)
    return FinetuneResult(A, losses)
