"""Mask-free inference: subtitled video in, clean video out.

Only the subtitled video, the adapted checkpoint and the config are read.
The occlusion map is computed at every denoising step but is not part of the
output; ``export_debug_masks`` is a read-only tap for inspection.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .diffusion import ddim_step, latent_decode, latent_encode
from .numerics import make_generator, save_tensor
from .stage2 import AdaptedModel


@dataclass
class InferenceConfig:
    steps: int = 5
    seed: int = 0
    export_debug_masks: bool = False
    lora_scale: float = 1.0


@torch.no_grad()
def _denoise(sub_video: torch.Tensor, model: AdaptedModel, cfg: InferenceConfig, masks: list | None):
    sched = model.sched
    if cfg.steps < 1 or cfg.steps > sched.t_train:
        raise ValueError(f"steps must lie in [1, {sched.t_train}]")
    p = model.latent_factor
    T, H, W, C = sub_video.shape
    if H % p or W % p:
        raise ValueError(f"video {H}x{W} incompatible with latent factor {p}")
    model.denoiser.set_lora_scale(cfg.lora_scale)
    z_sub = latent_encode(sub_video, p)[None]
    g = make_generator(cfg.seed)
    z = torch.randn(z_sub.shape, generator=g)
    ts = sched.timesteps(cfg.steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        eps_hat, m_pred = model(z, z_sub, torch.tensor([t]))
        if masks is not None:
            masks.append(m_pred[0].clone())
        z = ddim_step(z, eps_hat, t, t_prev, sched)
    return latent_decode(z[0], p).clamp(0.0, 1.0)


def remove_subtitles(sub_video: torch.Tensor, model: AdaptedModel, cfg: InferenceConfig = InferenceConfig()) -> torch.Tensor:
    return _denoise(sub_video, model, cfg, None)


def export_debug_masks(sub_video: torch.Tensor, model: AdaptedModel, cfg: InferenceConfig, out_dir: str | Path | None = None):
    """Run inference and return ``(video, masks)``; writes masks when ``cfg.export_debug_masks``."""
    masks: list[torch.Tensor] = []
    video = _denoise(sub_video, model, cfg, masks)
    if cfg.export_debug_masks and out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(masks):
            save_tensor(out_dir / f"mask_step{i:02d}.clrt", m)
    return video, masks
