"""Diffusion substrate for Stage II.

* an exact space-to-depth latent transform (stands in for a learned VAE),
* a linear-beta noise schedule with DDIM (eta = 0) updates,
* a small video DiT whose attention and feed-forward linears carry LoRA,
* the occlusion head that reads the DiT's middle-block activations.

Latents are channels-last: ``[T, h, w, c]`` or batched ``[B, T, h, w, c]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import make_generator

# ---------------------------------------------------------------------------
# Latent transform


def latent_encode(video: torch.Tensor, p: int = 4) -> torch.Tensor:
    """``[T, H, W, 3] -> [T, H/p, W/p, 3p^2]`` by pure pixel rearrangement."""
    *lead, H, W, C = video.shape
    if H % p or W % p:
        raise ValueError(f"spatial dims {H}x{W} not divisible by latent factor {p}")
    x = video.reshape(*lead, H // p, p, W // p, p, C)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, H // p, W // p, p * p * C)


def latent_decode(latent: torch.Tensor, p: int = 4) -> torch.Tensor:
    *lead, h, w, c = latent.shape
    if c % (p * p):
        raise ValueError(f"latent channels {c} not divisible by p^2={p * p}")
    C = c // (p * p)
    x = latent.reshape(*lead, h, w, p, p, C)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, h * p, w * p, C)


# ---------------------------------------------------------------------------
# Schedule and DDIM


@dataclass(frozen=True)
class DiffusionSchedule:
    t_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 5

    @cached_property
    def betas(self) -> torch.Tensor:
        return torch.linspace(self.beta_start, self.beta_end, self.t_train, dtype=torch.float64)

    @cached_property
    def alpha_bar(self) -> torch.Tensor:
        """Index ``t`` in ``[0, t_train]``; entry 0 is the clean end (exactly 1)."""
        ab = torch.cumprod(1.0 - self.betas, 0)
        return torch.cat([torch.ones(1, dtype=torch.float64), ab])

    def timesteps(self, steps: int | None = None) -> list[int]:
        """Evenly spaced ``t_train, ..., 0``; ties round toward larger t."""
        n = self.ddim_steps if steps is None else steps
        if not 1 <= n <= self.t_train:
            raise ValueError(f"steps must lie in [1, {self.t_train}]")
        return [math.ceil(self.t_train * (n - i) / n) for i in range(n + 1)]


def _ab(sched: DiffusionSchedule, t, like: torch.Tensor) -> torch.Tensor:
    """alpha_bar at ``t`` broadcast against ``like`` (t scalar or per-batch)."""
    t = torch.as_tensor(t)
    ab = sched.alpha_bar[t].to(like.dtype)
    return ab.view(*ab.shape, *([1] * (like.dim() - ab.dim())))


def forward_diffuse(z0: torch.Tensor, t, noise: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    if noise.shape != z0.shape:
        raise ValueError("noise shape must equal z0 shape")
    tt = torch.as_tensor(t)
    if (tt < 0).any() or (tt > sched.t_train).any():
        raise ValueError(f"t out of range [0, {sched.t_train}]: {t}")
    ab = _ab(sched, tt, z0)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * noise


def predict_z0(z_t: torch.Tensor, eps_hat: torch.Tensor, t, sched: DiffusionSchedule) -> torch.Tensor:
    ab = _ab(sched, t, z_t)
    return (z_t - (1 - ab).sqrt() * eps_hat) / ab.sqrt()


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, sched: DiffusionSchedule) -> torch.Tensor:
    if not (sched.t_train >= t > t_prev >= 0):
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    z0_hat = predict_z0(z_t, eps_hat, t, sched)
    ab_prev = float(sched.alpha_bar[t_prev])
    return math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


# ---------------------------------------------------------------------------
# LoRA


class LoraLinear(nn.Module):
    """Frozen linear map plus a scaled rank-``r`` update ``B @ A``.

    ``A`` is ``[r, d_in]`` and ``B`` is ``[d_out, r]`` so that the effective
    weight is literally ``W_frozen + scale * (B @ A)``.
    """

    def __init__(self, d_in: int, d_out: int, rank: int = 4, scale: float = 1.0, bias: bool = True):
        super().__init__()
        if rank < 1 or rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} must lie in [1, min(d_in, d_out)={min(d_in, d_out)}]")
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        self.lora_A = nn.Parameter(torch.empty(rank, d_in))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank))
        self.rank = rank
        self.scale = scale

    def forward(self, x):
        y = F.linear(x, self.weight, self.bias)
        if self.scale == 0:
            return y
        return y + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)

    def effective_weight(self) -> torch.Tensor:
        return self.weight + self.scale * (self.lora_B @ self.lora_A)


def lora_linear(x: torch.Tensor, layer: LoraLinear) -> torch.Tensor:
    if x.shape[-1] != layer.weight.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} != d_in {layer.weight.shape[1]}")
    return layer(x)


# ---------------------------------------------------------------------------
# Denoiser


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.to(torch.float32)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _axis_embedding(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float32)[:, None]
    freqs = torch.exp(-math.log(100.0) * torch.arange(dim // 2, dtype=torch.float32) / max(dim // 2, 1))
    return torch.cat([torch.sin(pos * freqs), torch.cos(pos * freqs)], dim=-1)


def position_grid(T: int, h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed sinusoidal (frame, row, col) embedding ``[T, h, w, dim]``."""
    per = (dim // 3) // 2 * 2
    et = _axis_embedding(T, per)[:, None, None, :].expand(T, h, w, per)
    ey = _axis_embedding(h, per)[None, :, None, :].expand(T, h, w, per)
    ex = _axis_embedding(w, per)[None, None, :, :].expand(T, h, w, per)
    pad = torch.zeros(T, h, w, dim - 3 * per)
    return torch.cat([et, ey, ex, pad], dim=-1)


def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, rank: int):
        super().__init__()
        self.heads = heads
        self.q = LoraLinear(dim, dim, rank)
        self.k = LoraLinear(dim, dim, rank)
        self.v = LoraLinear(dim, dim, rank)
        self.o = LoraLinear(dim, dim, rank)

    def forward(self, x):  # [N, L, D]
        N, L, D = x.shape
        hd = D // self.heads

        def split(y):
            return y.view(N, L, self.heads, hd).transpose(1, 2)

        a = F.scaled_dot_product_attention(split(self.q(x)), split(self.k(x)), split(self.v(x)))
        return self.o(a.transpose(1, 2).reshape(N, L, D))


class Block(nn.Module):
    """adaLN-modulated transformer block attending within frames or across time."""

    def __init__(self, dim: int, heads: int, rank: int, axis: str, mlp_ratio: int = 4):
        super().__init__()
        self.axis = axis
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads, rank)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.ffn = nn.Sequential(LoraLinear(dim, mlp_ratio * dim, rank), nn.GELU(approximate="tanh"), LoraLinear(mlp_ratio * dim, dim, rank))
        self.ada = nn.Linear(dim, 6 * dim)

    def _attend(self, x):
        B, T, h, w, D = x.shape
        if self.axis == "space":
            y = self.attn(x.reshape(B * T, h * w, D))
            return y.view(B, T, h, w, D)
        y = self.attn(x.permute(0, 2, 3, 1, 4).reshape(B * h * w, T, D))
        return y.view(B, h, w, T, D).permute(0, 3, 1, 2, 4)

    def forward(self, x, c):  # x [B,T,h,w,D], c [B,D]
        mods = self.ada(F.silu(c))[:, None, None, None, :].chunk(6, dim=-1)
        sh1, sc1, g1, sh2, sc2, g2 = mods
        x = x + g1 * self._attend(_modulate(self.norm1(x), sh1, sc1))
        x = x + g2 * self.ffn(_modulate(self.norm2(x), sh2, sc2))
        return x


@dataclass
class DenoiserConfig:
    latent_channels: int = 48
    dim: int = 128
    depth: int = 4
    heads: int = 4
    lora_rank: int = 4
    lora_scale: float = 1.0
    t_embed_dim: int = 128
    tap_index: int | None = None  # block whose output is h_enc; default depth // 2 - 1

    @property
    def tap(self) -> int:
        return self.depth // 2 - 1 if self.tap_index is None else self.tap_index


# initial output-gate logit: the residual starts nearly closed, so copying
# the conditioning video is the default and inpainting has to be learned
GATE_BIAS = -4.0


class Denoiser(nn.Module):
    """Video DiT predicting noise from ``z_t`` and the subtitled-video latent.

    ``sqrt(ab_t) * z_t`` and ``z_sub`` are concatenated per token.  The
    network output is a gated residual on ``z_sub`` giving a clean-latent
    estimate, which is converted to the noise prediction; with the output
    layer at zero the denoiser reproduces ``z_sub`` exactly.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        D = cfg.dim
        self.embed = nn.Linear(2 * cfg.latent_channels, D)
        self.t_mlp = nn.Sequential(nn.Linear(cfg.t_embed_dim, D), nn.SiLU(), nn.Linear(D, D))
        axes = ("space", "time")
        self.blocks = nn.ModuleList([Block(D, cfg.heads, cfg.lora_rank, axes[i % 2]) for i in range(cfg.depth)])
        self.final_norm = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Linear(D, 2 * D)
        self.out = nn.Linear(D, cfg.latent_channels)
        self.gate = nn.Linear(D, 1)

    def lora_layers(self):
        return [m for m in self.modules() if isinstance(m, LoraLinear)]

    def set_lora_scale(self, scale: float) -> None:
        for m in self.lora_layers():
            m.scale = scale

    def forward(self, z_t, z_sub, t, sched: DiffusionSchedule):
        """Batched: ``z_t``, ``z_sub`` ``[B,T,h,w,c]``, ``t`` ``[B]`` ints.

        Returns ``(eps_hat, h_enc)`` with ``h_enc`` of shape ``[B,T,h,w,D]``.
        """
        B, T, h, w, _ = z_t.shape
        ab = _ab(sched, t, z_t)
        # sqrt(ab) * z_t keeps pure-noise inputs at large t from swamping z_sub
        x = self.embed(torch.cat([ab.sqrt() * z_t, z_sub], dim=-1)) + position_grid(T, h, w, self.cfg.dim).to(z_t.dtype)
        c = self.t_mlp(timestep_embedding(t, self.cfg.t_embed_dim).to(z_t.dtype))
        h_enc = None
        for i, blk in enumerate(self.blocks):
            x = blk(x, c)
            if i == self.cfg.tap:
                h_enc = x
        shift, scale = self.final_ada(F.silu(c))[:, None, None, None, :].chunk(2, dim=-1)
        y = _modulate(self.final_norm(x), shift, scale)
        # per-token gate: a closed gate copies z_sub exactly, which a plain
        # linear read-out of normalised features cannot do
        resid = torch.sigmoid(self.gate(y)) * self.out(y)
        z0_hat = z_sub + resid
        eps_hat = (z_t - ab.sqrt() * z0_hat) / (1 - ab).sqrt()
        return eps_hat, h_enc


def init_denoiser(cfg: DenoiserConfig, seed: int) -> Denoiser:
    """Seeded init; LoRA ``B`` and the output projection start at zero."""
    g = make_generator(seed)
    model = Denoiser(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("bias", "lora_B") or name.startswith(("out.", "gate.", "final_ada.")) or ".ada." in name:
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(p.shape[-1]))
        model.gate.bias.fill_(GATE_BIAS)
    return model


def reset_lora(model: Denoiser, seed: int, scale: float | None = None) -> None:
    g = make_generator(seed)
    with torch.no_grad():
        for layer in model.lora_layers():
            layer.lora_A.copy_(torch.randn(layer.lora_A.shape, generator=g) / math.sqrt(layer.lora_A.shape[1]))
            layer.lora_B.zero_()
            if scale is not None:
                layer.scale = scale


def dit_forward(z_t, z_sub, t, model: Denoiser, sched: DiffusionSchedule):
    """Unbatched convenience wrapper: ``[T,h,w,c]`` latents and an int ``t``."""
    if z_t.shape != z_sub.shape:
        raise ValueError(f"z_t {tuple(z_t.shape)} and z_sub {tuple(z_sub.shape)} differ")
    if not 1 <= int(t) <= sched.t_train:
        raise ValueError(f"t must lie in [1, {sched.t_train}]")
    eps, h = model(z_t[None], z_sub[None], torch.tensor([int(t)]), sched)
    return eps[0], h[0]


# ---------------------------------------------------------------------------
# Occlusion head


class OcclusionHead(nn.Module):
    """conv3x3 (D -> 64), SiLU, conv1x1 (64 -> 1) over each frame's token grid."""

    def __init__(self, dim: int = 128, hidden: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 1, 1)

    def logits(self, h_enc):  # [..., T, h, w, D] -> [..., T, h, w]
        *lead, h, w, D = h_enc.shape
        x = h_enc.reshape(-1, h, w, D).permute(0, 3, 1, 2)
        y = self.conv2(F.silu(self.conv1(x)))
        return y.reshape(*lead, h, w)

    def forward(self, h_enc):
        return torch.sigmoid(self.logits(h_enc))

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_head(dim: int, seed: int) -> OcclusionHead:
    g = make_generator(seed)
    head = OcclusionHead(dim)
    with torch.no_grad():
        for name, p in head.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(p[0].numel()))
    return head


def occlusion_predict(h_enc: torch.Tensor, head: OcclusionHead) -> torch.Tensor:
    if h_enc.shape[-1] != head.conv1.in_channels:
        raise ValueError(f"h_enc channels {h_enc.shape[-1]} != head input {head.conv1.in_channels}")
    return head(h_enc)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
