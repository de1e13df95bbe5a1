"""Deterministic miniature latent diffusion backbone.

A fixed-weight transformer over a flat token grid: per block one multi-head
self-attention, one cross-attention over the condition sequence, and a
per-token MLP. All weights come from a seeded generator; there is no
training. DDIM sampling and inversion run with eta=0 on a cosine
alpha-bar schedule. Self-attention exposes a hook seam where Q/K/V can be
observed or replaced per (layer, step, head), and each DDIM step exposes a
post-step latent hook.

The latent "VAE" is a fixed orthonormal affine on 2x2 pixel patches
(3 channels in, 4 latent channels, half spatial resolution), so
encode(decode(z)) == z to float precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .fileio import fnv1a64
from .kernels import attention_kernel

LATENT_CHANNELS = 4
_CODEC_SEED = 0x1A7E57
_CODEC_SCALE = 0.25
# Clamp on the schedule's upper end: keeps alpha_bar away from 0 so the
# x0 reconstruction term stays well-conditioned during inversion.
_SCHEDULE_CLAMP = 0.9


# ---------------------------------------------------------------------------
# schedule


def alpha_bar(u: float) -> float:
    """Cosine noise schedule; u in [0, 1], 0 = clean."""
    return math.cos((u + 0.008) / 1.008 * math.pi / 2.0) ** 2


def schedule_levels(steps: int) -> np.ndarray:
    """alpha_bar at the steps+1 levels used by DDIM; index 0 is clean."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    u = _SCHEDULE_CLAMP * np.arange(steps + 1) / steps
    return np.array([alpha_bar(float(x)) for x in u])


def level_u(steps: int, j: int) -> float:
    return _SCHEDULE_CLAMP * j / steps


# ---------------------------------------------------------------------------
# attention


def attention(Q, K, V, scale: float) -> np.ndarray:
    """softmax(Q K^T * scale) V with a numerically stable softmax."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("Q, K, V must be 2-D")
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"Q dim {Q.shape[1]} != K dim {K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise ValueError(f"K has {K.shape[0]} tokens but V has {V.shape[0]}")
    return attention_kernel(Q, K, V, scale)


# ---------------------------------------------------------------------------
# hooks


class Hook:
    """Override to observe or replace attention inputs and step outputs."""

    def self_attn(self, layer: int, head: int, step_index: int, Q, K, V):
        return None  # None = leave unchanged

    def post_step(self, step_index: int, x):
        return None


class RecordingHook(Hook):
    """Captures self-attention K/V per (layer, step, head) as f32."""

    def __init__(self):
        self.records: dict[tuple[int, int, int], tuple[np.ndarray, np.ndarray]] = {}

    def self_attn(self, layer, head, step_index, Q, K, V):
        self.records[(layer, step_index, head)] = (
            np.asarray(K, dtype=np.float32).copy(),
            np.asarray(V, dtype=np.float32).copy(),
        )
        return None


# ---------------------------------------------------------------------------
# condition


@dataclass
class ConditionSet:
    """Condition sequence plus optional structural control maps.

    `controls` holds (kind, latent-shaped map, strength) triples where kind
    selects the model's control projection ("lineart" or "depth").
    """

    tokens: np.ndarray
    controls: Sequence[tuple[str, np.ndarray, float]] = field(default_factory=tuple)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise ValueError("condition tokens must be 2-D")
        for kind, cmap, w in self.controls:
            if not np.isfinite(w) or w < 0.0:
                raise ValueError(f"control strength for {kind} must be finite and >= 0")
            if np.asarray(cmap).shape[0] != LATENT_CHANNELS:
                raise ValueError("control maps must be latent-shaped")


# ---------------------------------------------------------------------------
# model


class ToyModel:
    def __init__(
        self,
        seed: int,
        dim: int = 16,
        heads: int = 2,
        blocks: int = 2,
        mlp_hidden: int = 32,
        cond_dim: int | None = None,
    ):
        self.seed = seed
        self.dim = dim
        self.heads = heads
        self.blocks = blocks
        self.head_dim = dim // heads
        self.mlp_hidden = mlp_hidden
        self.cond_dim = cond_dim or dim
        if dim % heads != 0:
            raise ValueError("dim must be divisible by heads")
        rng = np.random.default_rng(seed)
        self._names: list[str] = []
        self.w: dict[str, np.ndarray] = {}

        def mk(name, shape, scale):
            self.w[name] = rng.standard_normal(shape) * scale
            self._names.append(name)

        c = LATENT_CHANNELS
        d, hd, hid = dim, self.head_dim, mlp_hidden
        mk("in.W", (c, d), 1 / math.sqrt(c))
        mk("in.b", (d,), 0.1)
        mk("time.W", (d, d), 1 / math.sqrt(d))
        mk("time.b", (d,), 0.1)
        for kind in ("lineart", "depth"):
            mk(f"ctrl.{kind}.W", (c, d), 1 / math.sqrt(c))
        for b in range(blocks):
            for h in range(heads):
                for nm in ("q", "k", "v"):
                    mk(f"blk{b}.self{h}.{nm}", (d, hd), 1 / math.sqrt(d))
                mk(f"blk{b}.self{h}.o", (hd, d), 1 / math.sqrt(hd))
                for nm in ("q",):
                    mk(f"blk{b}.cross{h}.{nm}", (d, hd), 1 / math.sqrt(d))
                for nm in ("k", "v"):
                    mk(f"blk{b}.cross{h}.{nm}", (self.cond_dim, hd), 1 / math.sqrt(self.cond_dim))
                mk(f"blk{b}.cross{h}.o", (hd, d), 1 / math.sqrt(hd))
            mk(f"blk{b}.mlp.W1", (d, hid), 1 / math.sqrt(d))
            mk(f"blk{b}.mlp.b1", (hid,), 0.1)
            mk(f"blk{b}.mlp.W2", (hid, d), 1 / math.sqrt(hid))
            mk(f"blk{b}.mlp.b2", (d,), 0.1)
        # damped output keeps the backbone smooth enough for accurate
        # inversion round trips at desk-scale step counts
        mk("out.W", (d, c), 0.3 / math.sqrt(d))
        mk("out.b", (c,), 0.1)

    def weights_checksum(self) -> str:
        h = 0xCBF29CE484222325
        for name in self._names:
            h ^= fnv1a64(self.w[name].tobytes())
            h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        return f"{h:016x}"

    def prompt_tokens(self, prompt: str) -> np.ndarray:
        """4 condition tokens drawn from a generator seeded by the prompt's
        stable 64-bit hash."""
        rng = np.random.default_rng(fnv1a64(prompt.encode("utf-8")))
        return rng.standard_normal((4, self.cond_dim))

    def _time_features(self, u: float) -> np.ndarray:
        # low frequencies only: the noise estimate must vary slowly across
        # adjacent schedule levels for DDIM inversion to be accurate
        half = self.dim // 2
        freqs = np.geomspace(0.25, 2.0, half)
        ang = 2.0 * math.pi * freqs * u
        return np.concatenate([np.sin(ang), np.cos(ang)])


def build_toy_model(seed: int, **dims) -> ToyModel:
    return ToyModel(seed, **dims)


def _ln(x: np.ndarray):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    sigma = np.sqrt(var + 1e-6)
    return (x - mu) / sigma, sigma


def _ln_backward(y: np.ndarray, sigma: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return (dy - dy.mean(axis=1, keepdims=True) - y * (dy * y).mean(axis=1, keepdims=True)) / sigma


def denoise_tokens(
    model: ToyModel,
    x_tokens: np.ndarray,
    u: float,
    cond: ConditionSet,
    hooks: Hook | None = None,
    step_index: int = 0,
    tape: list | None = None,
) -> np.ndarray:
    """Noise estimate on a (n_tokens x latent_channels) grid.

    With `tape` a list, intermediates needed by `token_gradient` are
    recorded; the tape does not account for hook replacements, so the two
    are mutually exclusive.
    """
    if tape is not None and hooks is not None:
        raise ValueError("tape recording cannot run together with hooks")
    w = model.w
    scale = 1.0 / math.sqrt(model.head_dim)
    h = x_tokens @ w["in.W"] + w["in.b"]
    h = h + model._time_features(u) @ w["time.W"] + w["time.b"]
    for kind, cmap, weight in cond.controls:
        if weight == 0.0:
            continue
        ctrl_tokens = np.asarray(cmap, dtype=np.float64).reshape(LATENT_CHANNELS, -1).T
        h = h + weight * (ctrl_tokens @ w[f"ctrl.{kind}.W"])
    tokens = cond.tokens
    for b in range(model.blocks):
        a, sig = _ln(h)
        attn_out = np.zeros_like(h)
        for hd in range(model.heads):
            Q = a @ w[f"blk{b}.self{hd}.q"]
            K = a @ w[f"blk{b}.self{hd}.k"]
            V = a @ w[f"blk{b}.self{hd}.v"]
            if hooks is not None:
                replaced = hooks.self_attn(b, hd, step_index, Q, K, V)
                if replaced is not None:
                    Q, K, V = replaced
            attn_out += attention(Q, K, V, scale) @ w[f"blk{b}.self{hd}.o"]
        if tape is not None:
            tape.append(("self", a, sig))
        h = h + attn_out
        a, sig = _ln(h)
        cross_out = np.zeros_like(h)
        cross_saved = []
        for hd in range(model.heads):
            Q = a @ w[f"blk{b}.cross{hd}.q"]
            Kc = tokens @ w[f"blk{b}.cross{hd}.k"]
            Vc = tokens @ w[f"blk{b}.cross{hd}.v"]
            S = (Q @ Kc.T) * scale
            S -= S.max(axis=1, keepdims=True)
            np.exp(S, out=S)
            S /= S.sum(axis=1, keepdims=True)
            cross_out += (S @ Vc) @ w[f"blk{b}.cross{hd}.o"]
            if tape is not None:
                cross_saved.append((Q, Kc, Vc, S))
        if tape is not None:
            tape.append(("cross", a, sig, cross_saved))
        h = h + cross_out
        a, sig = _ln(h)
        mid = np.tanh(a @ w[f"blk{b}.mlp.W1"] + w[f"blk{b}.mlp.b1"])
        if tape is not None:
            tape.append(("mlp", a, sig, mid))
        h = h + mid @ w[f"blk{b}.mlp.W2"] + w[f"blk{b}.mlp.b2"]
    a, sig = _ln(h)
    if tape is not None:
        tape.append(("out", a, sig))
    return a @ w["out.W"] + w["out.b"]


def token_gradient(model: ToyModel, tape: list, d_eps: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the condition tokens, given
    d loss / d eps and the tape from `denoise_tokens`."""
    w = model.w
    scale = 1.0 / math.sqrt(model.head_dim)
    tape = list(tape)
    kind, a, sig = tape.pop()
    assert kind == "out"
    dh = _ln_backward(a, sig, d_eps @ w["out.W"].T)
    d_tokens = None
    for b in reversed(range(model.blocks)):
        kind, a, sig, mid = tape.pop()
        assert kind == "mlp"
        da = ((dh @ w[f"blk{b}.mlp.W2"].T) * (1.0 - mid * mid)) @ w[f"blk{b}.mlp.W1"].T
        dh = dh + _ln_backward(a, sig, da)
        kind, a, sig, cross_saved = tape.pop()
        assert kind == "cross"
        da = np.zeros_like(a)
        for hd in range(model.heads):
            Q, Kc, Vc, S = cross_saved[hd]
            dO = dh @ w[f"blk{b}.cross{hd}.o"].T
            dVc = S.T @ dO
            dA = dO @ Vc.T
            dS = S * (dA - (dA * S).sum(axis=1, keepdims=True))
            dQ = (dS @ Kc) * scale
            dKc = (dS.T @ Q) * scale
            da += dQ @ w[f"blk{b}.cross{hd}.q"].T
            dt = dKc @ w[f"blk{b}.cross{hd}.k"].T + dVc @ w[f"blk{b}.cross{hd}.v"].T
            d_tokens = dt if d_tokens is None else d_tokens + dt
        dh = dh + _ln_backward(a, sig, da)
        kind, a, sig = tape.pop()
        assert kind == "self"
        da = np.zeros_like(a)
        for hd in range(model.heads):
            Q = a @ w[f"blk{b}.self{hd}.q"]
            K = a @ w[f"blk{b}.self{hd}.k"]
            V = a @ w[f"blk{b}.self{hd}.v"]
            S = (Q @ K.T) * scale
            S -= S.max(axis=1, keepdims=True)
            np.exp(S, out=S)
            S /= S.sum(axis=1, keepdims=True)
            dO = dh @ w[f"blk{b}.self{hd}.o"].T
            dV = S.T @ dO
            dA = dO @ V.T
            dS = S * (dA - (dA * S).sum(axis=1, keepdims=True))
            dQ = (dS @ K) * scale
            dK = (dS.T @ Q) * scale
            da += (
                dQ @ w[f"blk{b}.self{hd}.q"].T
                + dK @ w[f"blk{b}.self{hd}.k"].T
                + dV @ w[f"blk{b}.self{hd}.v"].T
            )
        dh = dh + _ln_backward(a, sig, da)
    return d_tokens


def denoise_step(
    model: ToyModel,
    x_t: np.ndarray,
    u: float,
    cond: ConditionSet,
    hooks: Hook | None = None,
    step_index: int = 0,
) -> np.ndarray:
    """Noise estimate for a (channels, H, W) latent at noise level u."""
    c, height, width = x_t.shape
    tokens = x_t.reshape(c, height * width).T
    eps = denoise_tokens(model, tokens, u, cond, hooks, step_index)
    return eps.T.reshape(c, height, width)


@dataclass
class DDIMTrajectory:
    latents: list[np.ndarray]  # steps + 1 entries, in generation order
    steps: int


def ddim_sample_range(
    model: ToyModel,
    x: np.ndarray,
    cond: ConditionSet,
    steps: int,
    hooks: Hook | None = None,
    start: int = 0,
    stop: int | None = None,
) -> list[np.ndarray]:
    """Run DDIM step indices [start, stop) of a `steps`-step schedule.

    `x` must sit at noise level steps - start. Returns the visited latents
    (input first), so a full run yields steps + 1 entries.
    """
    stop = steps if stop is None else stop
    abar = schedule_levels(steps)
    x = np.asarray(x, dtype=np.float64)
    latents = [x.copy()]
    for s in range(start, stop):
        j = steps - s
        eps = denoise_step(model, x, level_u(steps, j), cond, hooks, step_index=s)
        x0_hat = (x - math.sqrt(1.0 - abar[j]) * eps) / math.sqrt(abar[j])
        x = math.sqrt(abar[j - 1]) * x0_hat + math.sqrt(1.0 - abar[j - 1]) * eps
        if hooks is not None:
            replaced = hooks.post_step(s, x)
            if replaced is not None:
                x = replaced
        latents.append(x.copy())
    return latents


def ddim_sample(
    model: ToyModel,
    x_T: np.ndarray,
    cond: ConditionSet,
    steps: int,
    hooks: Hook | None = None,
) -> DDIMTrajectory:
    """Deterministic DDIM (eta=0) from the most-noised level down to clean.

    Step index s runs 0..steps-1 with 0 at the most-noised level.
    """
    return DDIMTrajectory(ddim_sample_range(model, x_T, cond, steps, hooks), steps)


def ddim_invert(
    model: ToyModel,
    x_0: np.ndarray,
    cond: ConditionSet,
    steps: int,
    hooks: Hook | None = None,
    refine: int = 1,
) -> DDIMTrajectory:
    """Reverse DDIM recursion from a clean latent up to the most-noised
    level. Hook step indices mirror sampling: the most-noised evaluation is
    recorded at index 0.

    Each step runs `refine` fixed-point corrector passes that re-evaluate
    the noise estimate at the target level; at the fixed point the
    invert-then-sample round trip is exact, and the recorded features sit
    at the levels the sampling pass evaluates. Hooks fire once per level,
    on the final evaluation.
    """
    abar = schedule_levels(steps)
    x = np.asarray(x_0, dtype=np.float64)
    latents = [x.copy()]
    for j in range(steps):
        step_index = steps - 1 - j

        def invert_update(eps):
            x0_hat = (x - math.sqrt(1.0 - abar[j]) * eps) / math.sqrt(abar[j])
            return math.sqrt(abar[j + 1]) * x0_hat + math.sqrt(1.0 - abar[j + 1]) * eps

        last = refine == 0
        eps = denoise_step(
            model, x, level_u(steps, j), cond, hooks if last else None, step_index
        )
        x_next = invert_update(eps)
        for r in range(refine):
            last = r == refine - 1
            eps = denoise_step(
                model,
                x_next,
                level_u(steps, j + 1),
                cond,
                hooks if last else None,
                step_index,
            )
            x_next = invert_update(eps)
        x = x_next
        latents.append(x.copy())
    return DDIMTrajectory(latents, steps)


# ---------------------------------------------------------------------------
# latent codec and control map extraction


def _codec_basis():
    rng = np.random.default_rng(_CODEC_SEED)
    raw = rng.standard_normal((12, LATENT_CHANNELS))
    q, _ = np.linalg.qr(raw)
    return q  # (12, 4), orthonormal columns


_CODEC_Q = _codec_basis()


def encode_image(img: np.ndarray) -> np.ndarray:
    """(3, H, W) image in [0,1] -> (4, H/2, W/2) latent. H, W must be even."""
    img = np.asarray(img, dtype=np.float64)
    c, height, width = img.shape
    if c != 3 or height % 2 or width % 2:
        raise ValueError("image must be (3, H, W) with even H and W")
    patches = (
        img.reshape(3, height // 2, 2, width // 2, 2)
        .transpose(1, 3, 0, 2, 4)
        .reshape(-1, 12)
    )
    z = (patches - 0.5) @ _CODEC_Q / _CODEC_SCALE
    return z.reshape(height // 2, width // 2, LATENT_CHANNELS).transpose(2, 0, 1)


def decode_latent(z: np.ndarray) -> np.ndarray:
    """(4, h, w) latent -> (3, 2h, 2w) image (values may exceed [0,1])."""
    z = np.asarray(z, dtype=np.float64)
    c, h, w = z.shape
    if c != LATENT_CHANNELS:
        raise ValueError("latent must have 4 channels")
    tokens = z.reshape(c, h * w).T
    patches = tokens @ _CODEC_Q.T * _CODEC_SCALE + 0.5
    return (
        patches.reshape(h, w, 3, 2, 2).transpose(2, 0, 3, 1, 4).reshape(3, 2 * h, 2 * w)
    )


def lineart_map(img: np.ndarray) -> np.ndarray:
    """Sobel edge magnitude of the grayscale image, as a latent-shaped map."""
    gray = np.asarray(img, dtype=np.float64).mean(axis=0)
    gx = ndimage.sobel(gray, axis=0)
    gy = ndimage.sobel(gray, axis=1)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    return encode_image(np.stack([mag, mag, mag]))


def depth_map(img: np.ndarray) -> np.ndarray:
    """Grayscale Gaussian blur pseudo-depth, as a latent-shaped map."""
    gray = np.asarray(img, dtype=np.float64).mean(axis=0)
    blur = ndimage.gaussian_filter(gray, sigma=2.0)
    return encode_image(np.stack([blur, blur, blur]))
