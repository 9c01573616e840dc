"""Stage I: occlusion prior learned from paired videos without mask labels.

Pseudo-labels come from thresholded pixel differences.  Two small CNN
encoders split subtitle and content features at stride 8; a per-location
discriminator, a mask decoder and a reconstruction decoder complete the
model.  Videos are ``[T, H, W, 3]``; feature maps are ``[T, C, H/8, W/8]``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

from .numerics import (
    LrSchedule,
    OptimState,
    adamw_step,
    clip_grad_norm,
    load_checkpoint,
    lr_at,
    make_generator,
    save_checkpoint,
)

log = logging.getLogger(__name__)

CLAMP = 1e-7
FEATURE_STRIDE = 8
STAGE1_WEIGHTS = {"l_ortho": 1.0, "l_adv": 0.5, "l_region": 1.0, "l_recon": 0.1}


# ---------------------------------------------------------------------------
# Pseudo-labels


def pixel_diff(sub: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    if sub.shape != clean.shape:
        raise ValueError(f"shape mismatch: {tuple(sub.shape)} vs {tuple(clean.shape)}")
    return (sub - clean).pow(2).sum(-1).sqrt()


def threshold_mask(diff: torch.Tensor) -> torch.Tensor:
    """1 where ``diff > mean_t + std_t`` per frame (population std)."""
    d = diff.double()
    flat = d.reshape(d.shape[0], -1)
    mu = flat.mean(1)
    sigma = flat.std(1, unbiased=False)
    thr = (mu + sigma).view(-1, *([1] * (d.dim() - 1)))
    return (d > thr).to(torch.float32)


def pseudo_labels(sub: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    return threshold_mask(pixel_diff(sub, clean))


# ---------------------------------------------------------------------------
# Networks


def _conv(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.SiLU())


class Encoder(nn.Module):
    """Four conv stages, three of them stride 2: total stride 8."""

    def __init__(self, channels: int = 32):
        super().__init__()
        c = channels
        self.net = nn.Sequential(
            _conv(3, c // 2, 1),
            _conv(c // 2, c // 2, 2),
            _conv(c // 2, c, 2),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
        )

    def forward(self, frames):  # [T,3,H,W]
        return self.net(frames)


class UpDecoder(nn.Module):
    """Three 2x transposed-conv stages plus an output conv."""

    def __init__(self, channels: int, out_channels: int):
        super().__init__()
        c = channels
        self.net = nn.Sequential(
            nn.ConvTranspose2d(c, c, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(c, c // 2, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(c // 2, c // 2, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c // 2, out_channels, 3, padding=1),
        )

    def forward(self, feats):
        return self.net(feats)


class Discriminator(nn.Module):
    """Per-location classifier: three 1x1 convs, sigmoid output."""

    def __init__(self, channels: int = 32, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(hidden, hidden, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(hidden, 1, 1),
        )

    def forward(self, feats):
        return torch.sigmoid(self.net(feats))


class PriorModel(nn.Module):
    def __init__(self, channels: int = 32):
        super().__init__()
        self.channels = channels
        self.sub_encoder = Encoder(channels)
        self.content_encoder = Encoder(channels)
        self.mask_decoder = UpDecoder(channels, 1)
        self.recon_decoder = UpDecoder(channels, 3)
        self.discriminator = Discriminator(channels)

    def generator_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("discriminator."):
                yield name, p

    def discriminator_parameters(self):
        for name, p in self.discriminator.named_parameters():
            yield "discriminator." + name, p

    @torch.no_grad()
    def prior(self, sub: torch.Tensor) -> torch.Tensor:
        """Full-resolution prior map for a subtitled video; no clean video needed."""
        return predict_prior(self.sub_encoder(_to_nchw(sub)), self)


def init_prior_model(channels: int = 32, seed: int = 0) -> PriorModel:
    g = make_generator(seed)
    model = PriorModel(channels)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel() if p.dim() > 1 else p.numel()
                if isinstance(_owner(model, name), nn.ConvTranspose2d):
                    fan_in = p.shape[0] * p[0, 0].numel()
                p.copy_(torch.randn(p.shape, generator=g) * math.sqrt(2.0 / fan_in))
    return model


def _owner(model: nn.Module, pname: str) -> nn.Module:
    return model.get_submodule(pname.rsplit(".", 1)[0])


def _to_nchw(video: torch.Tensor) -> torch.Tensor:
    return video.permute(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# Forward pieces and losses


def encode_pair(sub: torch.Tensor, clean: torch.Tensor, model: PriorModel):
    T, H, W, _ = sub.shape
    if H % FEATURE_STRIDE or W % FEATURE_STRIDE:
        raise ValueError(f"H and W must be divisible by {FEATURE_STRIDE}, got {H}x{W}")
    if clean.shape != sub.shape:
        raise ValueError("sub and clean shapes differ")
    return model.sub_encoder(_to_nchw(sub)), model.content_encoder(_to_nchw(clean))


def ortho_loss(f_sub: torch.Tensor, f_content: torch.Tensor) -> torch.Tensor:
    """Mean over locations of the squared channel inner product."""
    if f_sub.shape != f_content.shape:
        raise ValueError("feature shapes differ")
    return (f_sub * f_content).sum(1).pow(2).mean()


def adv_loss_from_probs(d_sub: torch.Tensor, d_content: torch.Tensor) -> torch.Tensor:
    d_sub = d_sub.clamp(CLAMP, 1 - CLAMP)
    d_content = d_content.clamp(CLAMP, 1 - CLAMP)
    return -torch.log(d_sub).mean() - torch.log(1 - d_content).mean()


def adv_loss(f_sub: torch.Tensor, f_content: torch.Tensor, disc: nn.Module) -> torch.Tensor:
    return adv_loss_from_probs(disc(f_sub), disc(f_content))


def prior_logits(f_sub: torch.Tensor, model: PriorModel) -> torch.Tensor:
    return model.mask_decoder(f_sub)[:, 0]


def predict_prior(f_sub: torch.Tensor, model: PriorModel) -> torch.Tensor:
    """Sigmoid mask map ``[T, H, W]`` decoded from subtitle features only."""
    return torch.sigmoid(prior_logits(f_sub, model))


def region_loss(m_prior: torch.Tensor, pseudo: torch.Tensor) -> torch.Tensor:
    m = m_prior.clamp(CLAMP, 1 - CLAMP)
    return -(pseudo * torch.log(m) + (1 - pseudo) * torch.log(1 - m)).mean()


def recon_mse(recon: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    if recon.shape != clean.shape:
        raise ValueError(f"reconstruction shape {tuple(recon.shape)} != {tuple(clean.shape)}")
    return (recon - clean).pow(2).mean()


def recon_loss(f_content: torch.Tensor, model: PriorModel, clean: torch.Tensor) -> torch.Tensor:
    recon = model.recon_decoder(f_content).permute(0, 2, 3, 1)
    return recon_mse(recon, clean)


@dataclass
class LossReport:
    l_ortho: torch.Tensor
    l_adv: torch.Tensor
    l_region: torch.Tensor
    l_recon: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(v) for k, v in asdict(self).items()}


def stage1_loss(l_ortho, l_adv, l_region, l_recon) -> LossReport:
    parts = {"l_ortho": l_ortho, "l_adv": l_adv, "l_region": l_region, "l_recon": l_recon}
    for name, v in parts.items():
        if not math.isfinite(torch.as_tensor(v).item()):
            raise ValueError(f"non-finite stage-1 loss component {name}")
    total = sum(STAGE1_WEIGHTS[k] * v for k, v in parts.items())
    parts = {k: torch.as_tensor(v) for k, v in parts.items()}
    return LossReport(total=torch.as_tensor(total), **parts)


class GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -grad


def grad_reverse(x: torch.Tensor) -> torch.Tensor:
    return GradReverse.apply(x)


def stage1_forward(model: PriorModel, sub, clean, pseudo, reverse_content: bool = False) -> LossReport:
    """All four Stage-I terms for one clip.

    With ``reverse_content`` the content features reach the discriminator
    through a gradient-reversal layer, so encoders are pushed to make content
    features indistinguishable from subtitle features.
    """
    f_sub, f_content = encode_pair(sub, clean, model)
    fc_adv = grad_reverse(f_content) if reverse_content else f_content
    return stage1_loss(
        ortho_loss(f_sub, f_content),
        adv_loss(f_sub, fc_adv, model.discriminator),
        region_loss(predict_prior(f_sub, model), pseudo),
        recon_loss(f_content, model, clean),
    )


# ---------------------------------------------------------------------------
# Training


@dataclass
class Stage1Config:
    steps: int = 200
    lr: float = 2e-5
    warmup_steps: int = 500
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    clips_per_step: int = 2
    channels: int = 32


class TrainingDiverged(RuntimeError):
    pass


def train_stage1(samples, cfg: Stage1Config, seed: int, log_path: str | Path | None = None):
    """Alternating discriminator / encoder-decoder updates, 1:1.

    Returns ``(model, history)``; each history record holds the losses computed
    before that step's update.
    """
    model = init_prior_model(cfg.channels, seed)
    g = make_generator(seed + 1)
    pseudo = [pseudo_labels(s.sub, s.clean) for s in samples]
    sched = LrSchedule(cfg.lr, min(cfg.warmup_steps, max(cfg.steps - 1, 0)), max(cfg.steps, 1))
    gen_params = dict(model.generator_parameters())
    disc_params = dict(model.discriminator_parameters())
    gen_state, disc_state = OptimState(), OptimState()
    history = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(cfg.steps):
            idx = torch.randint(len(samples), (cfg.clips_per_step,), generator=g).tolist()
            lr = lr_at(step, sched)

            # discriminator on detached features
            with torch.no_grad():
                feats = [encode_pair(samples[i].sub, samples[i].clean, model) for i in idx]
            model.zero_grad(set_to_none=True)
            d_loss = sum(adv_loss(fs, fc, model.discriminator) for fs, fc in feats) / len(idx)
            d_loss.backward()
            if lr > 0:
                grads = {n: p.grad for n, p in disc_params.items() if p.grad is not None}
                clip_grad_norm(grads.values(), cfg.clip_norm)
                adamw_step(disc_params, grads, disc_state, lr, weight_decay=cfg.weight_decay)

            # encoders / decoders; discriminator weights fixed for this half-step
            model.zero_grad(set_to_none=True)
            reports = [stage1_forward(model, samples[i].sub, samples[i].clean, pseudo[i], reverse_content=True) for i in idx]
            total = sum(r.total for r in reports) / len(idx)
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite stage-1 loss at step {step}")
            total.backward()
            grads = {n: p.grad for n, p in gen_params.items() if p.grad is not None}
            _, gnorm = clip_grad_norm(grads.values(), cfg.clip_norm)
            if lr > 0:
                adamw_step(gen_params, grads, gen_state, lr, weight_decay=cfg.weight_decay)

            rec = {"step": step}
            for key in ("l_ortho", "l_adv", "l_region", "l_recon"):
                rec[key] = sum(getattr(r, key).item() for r in reports) / len(idx)
            rec["total"] = total.item()
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if step % 50 == 0 or step == cfg.steps - 1:
                log.info("stage1 step %d total %.4f region %.4f lr %.2e", step, rec["total"], rec["l_region"], lr)
    finally:
        if fh:
            fh.close()
    model.zero_grad(set_to_none=True)
    return model, history


def save_prior(model: PriorModel, directory: str | Path) -> Path:
    tensors = {k: v for k, v in model.state_dict().items()}
    return save_checkpoint(directory, tensors, meta={"kind": "prior", "channels": model.channels})


def load_prior(directory: str | Path) -> PriorModel:
    tensors, meta = load_checkpoint(directory)
    model = PriorModel(meta.get("channels", 32))
    model.load_state_dict(tensors)
    return model
