"""Torch latent-diffusion runtime with attention capture.

The registry builds seeded runtimes locally ("toy-unet" or
"toy-unet:<seed>"); pretrained checkpoints would slot in behind the same
interface but require network access to fetch. The UNet is a conv stem
plus transformer blocks over the latent token grid, with explicit per-head
query/key/value projections so the capture seam sees exactly what the
attention computes.
"""

from __future__ import annotations

import math

import torch
from torch import nn


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, layer_index: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.layer_index = layer_index
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim)
        self.capture = None  # callable(layer, head, K, V)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, _ = x.shape
        q = self.to_q(x).view(n, self.heads, self.head_dim)
        k = self.to_k(x).view(n, self.heads, self.head_dim)
        v = self.to_v(x).view(n, self.heads, self.head_dim)
        if self.capture is not None:
            for h in range(self.heads):
                self.capture(self.layer_index, h, k[:, h, :], v[:, h, :])
        scale = 1.0 / math.sqrt(self.head_dim)
        outs = []
        for h in range(self.heads):
            attn = torch.softmax(q[:, h] @ k[:, h].T * scale, dim=-1)
            outs.append(attn @ v[:, h])
        return self.to_out(torch.cat(outs, dim=-1))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int, cond_dim: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(cond_dim, dim)
        self.to_v = nn.Linear(cond_dim, dim)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        m = cond.shape[0]
        q = self.to_q(x).view(n, self.heads, self.head_dim)
        k = self.to_k(cond).view(m, self.heads, self.head_dim)
        v = self.to_v(cond).view(m, self.heads, self.head_dim)
        scale = 1.0 / math.sqrt(self.head_dim)
        outs = []
        for h in range(self.heads):
            attn = torch.softmax(q[:, h] @ k[:, h].T * scale, dim=-1)
            outs.append(attn @ v[:, h])
        return self.to_out(torch.cat(outs, dim=-1))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, cond_dim: int, layer_index: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, layer_index)
        self.norm2 = nn.LayerNorm(dim)
        self.cross = CrossAttention(dim, heads, cond_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))

    def forward(self, x, cond):
        x = x + self.attn(self.norm1(x))
        x = x + self.cross(self.norm2(x), cond)
        return x + self.mlp(self.norm3(x))


class LatentUNet(nn.Module):
    latent_channels = 4

    def __init__(self, dim: int = 32, heads: int = 2, blocks: int = 2, cond_dim: int = 32):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.cond_dim = cond_dim
        self.encoder = nn.Conv2d(3, self.latent_channels, kernel_size=2, stride=2)
        self.conv_in = nn.Conv2d(self.latent_channels, dim, kernel_size=3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.blocks = nn.ModuleList(
            [Block(dim, heads, cond_dim, i) for i in range(blocks)]
        )
        self.conv_out = nn.Conv2d(dim, self.latent_channels, kernel_size=3, padding=1)

    def time_embedding(self, t: float) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(torch.linspace(0.0, math.log(50.0), half, dtype=torch.float64))
        ang = freqs * t
        return torch.cat([torch.sin(ang), torch.cos(ang)]).to(torch.float32)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return self.encoder(image.unsqueeze(0)).squeeze(0)

    def forward(self, z: torch.Tensor, t: float, cond: torch.Tensor) -> torch.Tensor:
        h = self.conv_in(z.unsqueeze(0)).squeeze(0)
        c, height, width = h.shape
        tokens = h.reshape(c, height * width).T.contiguous()
        tokens = tokens + self.time_mlp(self.time_embedding(t))
        for block in self.blocks:
            tokens = block(tokens, cond)
        h = tokens.T.reshape(c, height, width)
        return self.conv_out(h.unsqueeze(0)).squeeze(0)


class TorchRuntime:
    """Seeded UNet plus the DDIM schedule and inversion loop."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        torch.manual_seed(seed)
        self.unet = LatentUNet()
        self.unet.eval()
        # scaled-linear beta schedule, 1000 train steps
        betas = torch.linspace(0.00085**0.5, 0.012**0.5, 1000, dtype=torch.float64) ** 2
        self.alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)

    @property
    def n_layers(self) -> int:
        return len(self.unet.blocks)

    @property
    def n_heads(self) -> int:
        return self.unet.heads

    def null_condition(self) -> torch.Tensor:
        g = torch.Generator().manual_seed(self.seed + 1)
        return torch.randn(4, self.unet.cond_dim, generator=g)

    def inversion_timesteps(self, steps: int) -> list[int]:
        stride = len(self.alphas_cumprod) // (steps + 1)
        return [i * stride for i in range(steps + 1)]

    @torch.no_grad()
    def ddim_invert(self, latent: torch.Tensor, steps: int, capture=None):
        """Reverse DDIM recursion; `capture(layer, step_index, head, K, V)`
        receives self-attention features with step index 0 at the most
        noised level."""
        grid = self.inversion_timesteps(steps)
        cond = self.null_condition()
        x = latent
        for j in range(steps):
            step_index = steps - 1 - j
            if capture is not None:
                def shim(layer, head, K, V, _s=step_index):
                    capture(layer, _s, head, K, V)
            else:
                shim = None
            for block in self.unet.blocks:
                block.attn.capture = shim
            try:
                eps = self.unet(x, float(grid[j]), cond)
            finally:
                for block in self.unet.blocks:
                    block.attn.capture = None
            a_t = float(self.alphas_cumprod[grid[j]])
            a_next = float(self.alphas_cumprod[grid[j + 1]])
            x0_hat = (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
            x = math.sqrt(a_next) * x0_hat + math.sqrt(1.0 - a_next) * eps
        return x


def load_runtime(model_id: str) -> TorchRuntime:
    if model_id == "toy-unet":
        return TorchRuntime(seed=0)
    if model_id.startswith("toy-unet:"):
        return TorchRuntime(seed=int(model_id.split(":", 1)[1]))
    raise ValueError(
        f"unknown model {model_id!r}: pretrained checkpoints need network access; "
        "registered runtimes: toy-unet[:seed]"
    )
