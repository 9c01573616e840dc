"""Pretraining of the frozen base denoiser.

There is no pretrained video model at this scale, so the base learns a
generic restoration prior first: clean videos are corrupted with random
semi-transparent boxes, bars and bands of thin strokes, and the denoiser is
trained with the plain (unweighted) loss conditioned on the corrupted latent.  The loss is taken on
the clean-latent estimate rather than on epsilon: converting between the two
scales errors by sqrt(ab / (1 - ab)), which is ~100x at t=1 and makes the
epsilon loss too noisy for a from-scratch run.  LoRA paths stay at zero
throughout, so the result is a pure base model.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import torch

from .diffusion import (
    DenoiserConfig,
    DiffusionSchedule,
    forward_diffuse,
    init_denoiser,
    latent_encode,
    predict_z0,
)
from .numerics import (
    LrSchedule,
    OptimState,
    adamw_step,
    clip_grad_norm,
    lr_at,
    make_generator,
)
from .stage2 import TrainingDiverged, generation_loss, latent_shape

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    steps: int = 1500
    lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    batch_size: int = 2
    max_boxes: int = 3
    latent_factor: int = 4


def _strokes(H: int, W: int, rng: torch.Generator) -> torch.Tensor:
    """Boolean ``[H, W]`` map of short 1-2 px line segments inside a random band."""
    band_h = int(torch.randint(4, max(5, H // 4), (), generator=rng))
    y0 = int(torch.randint(0, H - band_h + 1, (), generator=rng))
    x0 = int(torch.randint(0, W // 2, (), generator=rng))
    x1 = int(torch.randint(x0 + W // 4, W + 1, (), generator=rng))
    hit = torch.zeros(H, W, dtype=torch.bool)
    width = int(torch.randint(1, 3, (), generator=rng))
    for _ in range(int(torch.randint(4, 16, (), generator=rng))):
        a = torch.rand(2, generator=rng) * torch.tensor([band_h - 1, x1 - x0 - 1]) + torch.tensor([y0, x0])
        b = torch.rand(2, generator=rng) * torch.tensor([band_h - 1, x1 - x0 - 1]) + torch.tensor([y0, x0])
        pts = a + torch.linspace(0, 1, 32)[:, None] * (b - a)
        ys, xs = pts[:, 0].round().long(), pts[:, 1].round().long()
        for dy in range(width):
            hit[(ys + dy).clamp(0, H - 1), xs.clamp(0, W - 1)] = True
    return hit


def corrupt(video: torch.Tensor, rng: torch.Generator, max_boxes: int = 3) -> torch.Tensor:
    """Paint 1..max_boxes static random boxes, bars or stroke bands over every frame."""
    T, H, W, _ = video.shape
    out = video.clone()
    n = int(torch.randint(1, max_boxes + 1, (), generator=rng))
    for _ in range(n):
        kind = int(torch.randint(3, (), generator=rng))
        if kind == 0:
            bh = int(torch.randint(2, max(3, H // 8), (), generator=rng))
            bw = int(torch.randint(W // 4, W - 2, (), generator=rng))
        else:
            bh = int(torch.randint(3, H // 3, (), generator=rng))
            bw = int(torch.randint(3, W // 3, (), generator=rng))
        y0 = int(torch.randint(0, H - bh + 1, (), generator=rng))
        x0 = int(torch.randint(0, W - bw + 1, (), generator=rng))
        color = torch.rand(3, generator=rng)
        a = 0.5 + 0.5 * float(torch.rand((), generator=rng))
        if kind == 2:
            hit = _strokes(H, W, rng)
            out[:, hit] = (1 - a) * out[:, hit] + a * color
            continue
        region = out[:, y0 : y0 + bh, x0 : x0 + bw]
        out[:, y0 : y0 + bh, x0 : x0 + bw] = (1 - a) * region + a * color
    return out


def pretrain_base(clean_videos: list[torch.Tensor], cfg: PretrainConfig, denoiser_cfg: DenoiserConfig, seed: int,
                  sched: DiffusionSchedule = DiffusionSchedule(), log_path: str | Path | None = None):
    """Train all non-LoRA denoiser weights; returns ``(denoiser, history)``."""
    model = init_denoiser(denoiser_cfg, seed)
    params = {n: p for n, p in model.named_parameters() if ".lora_" not in n}
    for n, p in model.named_parameters():
        p.requires_grad_(n in params)
    g = make_generator(seed + 1)
    clean_all = torch.stack(clean_videos)
    p = cfg.latent_factor
    state = OptimState()
    lr_sched = LrSchedule(cfg.lr, min(cfg.warmup_steps, max(cfg.steps - 1, 0)), max(cfg.steps, 1))
    history = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(cfg.steps):
            idx = torch.randint(len(clean_videos), (cfg.batch_size,), generator=g)
            clean = clean_all[idx]
            cond = torch.stack([corrupt(v, g, cfg.max_boxes) for v in clean])
            t = torch.randint(1, sched.t_train + 1, (cfg.batch_size,), generator=g)
            noise = torch.randn((cfg.batch_size, *latent_shape(clean.shape[1:], p)), generator=g)
            z0 = latent_encode(clean, p)
            z_t = forward_diffuse(z0, t, noise, sched)
            model.zero_grad(set_to_none=True)
            eps_hat, _ = model(z_t, latent_encode(cond, p), t, sched)
            loss = generation_loss(predict_z0(z_t, eps_hat, t, sched), z0, torch.ones(eps_hat.shape[:-1]))
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite pretraining loss at step {step}")
            loss.backward()
            grads = {n: q.grad for n, q in params.items() if q.grad is not None}
            _, gnorm = clip_grad_norm(grads.values(), cfg.clip_norm)
            lr = lr_at(step, lr_sched)
            if lr > 0:
                adamw_step(params, grads, state, lr, weight_decay=cfg.weight_decay)
            rec = {"step": step, "loss": loss.item(), "lr": lr, "grad_norm": gnorm}
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if step % 100 == 0 or step == cfg.steps - 1:
                log.info("pretrain step %d loss %.4f lr %.2e", step, rec["loss"], lr)
    finally:
        if fh:
            fh.close()
    for q in model.parameters():
        q.requires_grad_(False)
    model.zero_grad(set_to_none=True)
    return model, history
