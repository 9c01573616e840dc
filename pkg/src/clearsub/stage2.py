"""Stage II: LoRA + occlusion-head training with adaptive focal weighting.

The occlusion head's map ``m_pred`` is never detached: it enters the
per-position weight ``(1 + alpha * m_pred) * (eps_gen + delta) ** gamma`` of
the diffusion loss, so regions that stay hard to generate pull ``m_pred`` up
while the L1 sparsity term pulls it down everywhere.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .diffusion import (
    Denoiser,
    DenoiserConfig,
    DiffusionSchedule,
    OcclusionHead,
    forward_diffuse,
    init_denoiser,
    init_head,
    latent_decode,
    latent_encode,
    predict_z0,
    reset_lora,
)
from .numerics import (
    LrSchedule,
    OptimState,
    adamw_step,
    clip_grad_norm,
    load_checkpoint,
    lr_at,
    make_generator,
    save_checkpoint,
    tensor_digest,
)

log = logging.getLogger(__name__)

CLAMP = 1e-7


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Schedules and weights


@dataclass(frozen=True)
class AlphaSchedule:
    alpha_min: float = 5.0
    alpha_max: float = 15.0
    t_period: int = 40


def alpha_at(k: int, sched: AlphaSchedule = AlphaSchedule()) -> float:
    """``alpha_min + (alpha_max - alpha_min) * |sin(2 pi k / T_period)|``.

    The phase is reduced with integer arithmetic so the zeros and peaks of
    ``|sin|`` land exactly on ``alpha_min`` and ``alpha_max``.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    P = sched.t_period
    r = (2 * k) % P  # |sin(pi * 2k/P)| has period P in 2k
    m = min(r, P - r)
    s = 0.0 if m == 0 else (1.0 if 2 * m == P else math.sin(math.pi * m / P))
    return sched.alpha_min + (sched.alpha_max - sched.alpha_min) * s


@dataclass(frozen=True)
class WeightConfig:
    gamma: float = 0.8
    delta: float = 1e-6

    def __post_init__(self):
        if self.gamma <= 0 or self.delta <= 0:
            raise ValueError("gamma and delta must be positive")


def pool_to_latent(x: torch.Tensor, p: int) -> torch.Tensor:
    """Average-pool ``[..., H, W]`` maps to ``[..., H/p, W/p]``."""
    *lead, H, W = x.shape
    return x.reshape(*lead, H // p, p, W // p, p).mean(dim=(-3, -1))


def gen_error(x_hat: torch.Tensor, x_clean: torch.Tensor, p: int = 4) -> torch.Tensor:
    """Channel-summed squared error per pixel, average-pooled to the latent grid."""
    if x_hat.shape != x_clean.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x_clean.shape)}")
    return pool_to_latent((x_hat - x_clean).pow(2).sum(-1), p)


def adaptive_weights(m_pred: torch.Tensor, eps_gen: torch.Tensor, alpha: float, cfg: WeightConfig = WeightConfig()) -> torch.Tensor:
    return (1 + alpha * m_pred) * (eps_gen + cfg.delta).pow(cfg.gamma)


# ---------------------------------------------------------------------------
# Losses


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)


def distill_loss(m_pred: torch.Tensor, m_prior: torch.Tensor) -> torch.Tensor:
    if m_pred.shape != m_prior.shape:
        raise ValueError("m_pred and m_prior grids differ")
    return smooth_l1(m_pred - m_prior).mean()


def generation_loss(eps_hat: torch.Tensor, eps_true: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Mean over positions of ``w * ||eps_hat - eps||^2`` (norm over latent channels)."""
    if eps_hat.shape != eps_true.shape:
        raise ValueError("eps shapes differ")
    r2 = (eps_hat - eps_true).pow(2).sum(-1)
    return (weights * r2).mean()


def bernoulli_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    p = p.clamp(CLAMP, 1 - CLAMP)
    q = q.clamp(CLAMP, 1 - CLAMP)
    return p * torch.log(p / q) + (1 - p) * torch.log((1 - p) / (1 - q))


def sparsity_loss(m_pred: torch.Tensor, m_prior: torch.Tensor) -> torch.Tensor:
    m = m_pred.clamp(CLAMP, 1 - CLAMP)
    return m.mean() + 0.5 * bernoulli_kl(m_pred, m_prior).mean()


@dataclass
class StageTwoBatchResult:
    total: torch.Tensor
    l_distill: torch.Tensor
    l_gen: torch.Tensor
    l_sparse: torch.Tensor
    alpha: float = float("nan")
    mean_mpred: float = float("nan")
    mean_epsgen: float = float("nan")


def stage2_loss(l_distill, l_gen, l_sparse, alpha=float("nan"), mean_mpred=float("nan"), mean_epsgen=float("nan")) -> StageTwoBatchResult:
    for name, v in (("l_distill", l_distill), ("l_gen", l_gen), ("l_sparse", l_sparse)):
        if not math.isfinite(torch.as_tensor(v).item()):
            raise ValueError(f"non-finite stage-2 loss component {name}")
    total = l_distill + l_gen + 0.1 * l_sparse
    return StageTwoBatchResult(
        torch.as_tensor(total), torch.as_tensor(l_distill), torch.as_tensor(l_gen), torch.as_tensor(l_sparse),
        float(alpha), float(mean_mpred), float(mean_epsgen),
    )


def blackout_augment(m_pred: torch.Tensor, prob: float, rng: torch.Generator) -> torch.Tensor:
    """Per sample (leading dim of ``[B, T, h, w]``), with probability ``prob``
    floor one random rectangle of at most a quarter of the ``h x w`` grid."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must lie in [0, 1]")
    batched = m_pred.dim() == 4
    m = m_pred if batched else m_pred[None]
    B, _, h, w = m.shape
    keep = torch.ones_like(m, dtype=torch.bool)
    for b in range(B):
        draw = torch.rand((), generator=rng).item()
        if draw >= prob:
            continue
        rh = int(torch.randint(1, max(h // 2, 1) + 1, (), generator=rng))
        rw = int(torch.randint(1, max(w // 2, 1) + 1, (), generator=rng))
        y0 = int(torch.randint(0, h - rh + 1, (), generator=rng))
        x0 = int(torch.randint(0, w - rw + 1, (), generator=rng))
        keep[b, :, y0 : y0 + rh, x0 : x0 + rw] = False
    out = torch.where(keep, m, torch.full_like(m, CLAMP))
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# Adapted model


class AdaptedModel(nn.Module):
    """Frozen base denoiser with trainable LoRA matrices and an occlusion head."""

    def __init__(self, denoiser: Denoiser, head: OcclusionHead, sched: DiffusionSchedule = DiffusionSchedule(), latent_factor: int = 4):
        super().__init__()
        self.denoiser = denoiser
        self.head = head
        self.sched = sched
        self.latent_factor = latent_factor
        for name, p in self.denoiser.named_parameters():
            p.requires_grad_(".lora_" in name)

    def trainable_named(self) -> dict[str, torch.Tensor]:
        out = {f"lora/{n}": p for n, p in self.denoiser.named_parameters() if ".lora_" in n}
        out.update({f"head/{n}": p for n, p in self.head.named_parameters()})
        return out

    def frozen_named(self) -> dict[str, torch.Tensor]:
        return {f"frozen/{n}": p for n, p in self.denoiser.named_parameters() if ".lora_" not in n}

    def param_report(self) -> dict:
        lora = sum(p.numel() for k, p in self.trainable_named().items() if k.startswith("lora/"))
        head = self.head.n_params()
        frozen = sum(p.numel() for p in self.frozen_named().values())
        total = lora + head + frozen
        return {
            "schema": 1,
            "frozen_params": frozen,
            "lora_params": lora,
            "head_params": head,
            "trainable_params": lora + head,
            "total_params": total,
            "trainable_fraction": (lora + head) / total,
        }

    @property
    def trainable_fraction(self) -> float:
        return self.param_report()["trainable_fraction"]

    def forward(self, z_t, z_sub, t):
        eps_hat, h_enc = self.denoiser(z_t, z_sub, t, self.sched)
        return eps_hat, self.head(h_enc)


def frozen_digest(model: AdaptedModel) -> str:
    return tensor_digest(model.frozen_named())


def save_base(denoiser: Denoiser, directory: str | Path) -> Path:
    tensors = {f"frozen/{n}": p for n, p in denoiser.named_parameters() if ".lora_" not in n}
    meta = {"kind": "base", "config": asdict(denoiser.cfg), "frozen_sha256": tensor_digest(tensors)}
    return save_checkpoint(directory, tensors, meta)


def load_base(directory: str | Path, lora_rank: int | None = None) -> Denoiser:
    """LoRA tensors are not part of a base, so the rank may be chosen at load time."""
    tensors, meta = load_checkpoint(directory)
    cfg = DenoiserConfig(**meta["config"])
    if lora_rank is not None:
        cfg.lora_rank = lora_rank
    model = init_denoiser(cfg, seed=0)
    own = dict(model.named_parameters())
    with torch.no_grad():
        for name, t in tensors.items():
            own[name.removeprefix("frozen/")].copy_(t)
    return model


def save_adapted(model: AdaptedModel, directory: str | Path, step: int | None = None) -> Path:
    """Stores only ``lora/*`` and ``head/*`` plus a hash of the frozen base."""
    tensors = {k: v for k, v in model.trainable_named().items()}
    meta = {
        "kind": "adapted",
        "config": asdict(model.denoiser.cfg),
        "latent_factor": model.latent_factor,
        "schedule": asdict(model.sched),
        "frozen_sha256": frozen_digest(model),
        "step": step,
    }
    return save_checkpoint(directory, tensors, meta)


def load_adapted(directory: str | Path, base: Denoiser) -> AdaptedModel:
    tensors, meta = load_checkpoint(directory)
    cfg = DenoiserConfig(**meta["config"])
    if cfg.lora_rank != base.cfg.lora_rank:
        raise ValueError(f"checkpoint LoRA rank {cfg.lora_rank} != base rank {base.cfg.lora_rank}; load the base with lora_rank={cfg.lora_rank}")
    head = init_head(cfg.dim, 0)
    model = AdaptedModel(base, head, DiffusionSchedule(**meta["schedule"]), meta["latent_factor"])
    if frozen_digest(model) != meta["frozen_sha256"]:
        raise ValueError("adapted checkpoint does not match this frozen base")
    own = model.trainable_named()
    missing = set(own) - set(tensors)
    extra = set(tensors) - set(own)
    if extra:
        raise KeyError(f"checkpoint tensors not in model: {sorted(extra)[:3]}")
    if missing:
        raise KeyError(f"checkpoint missing tensors: {sorted(missing)[:3]}")
    with torch.no_grad():
        for name, t in tensors.items():
            own[name].copy_(t)
    return model


# ---------------------------------------------------------------------------
# Training


@dataclass
class Stage2Config:
    steps: int = 2000
    lr: float = 1e-4
    warmup_steps: int = 0
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    batch_size: int = 2
    lora_rank: int = 4
    lora_scale: float = 1.0
    alpha: AlphaSchedule = field(default_factory=AlphaSchedule)
    weights: WeightConfig = field(default_factory=WeightConfig)
    blackout_prob: float = 0.1
    checkpoint_every: int = 25
    keep_checkpoints: int = 3
    latent_factor: int = 4
    loss_space: str = "eps"

    def __post_init__(self):
        if self.loss_space not in ("eps", "z0"):
            raise ValueError(f"loss_space must be 'eps' or 'z0', got {self.loss_space!r}")


def prior_latent_maps(prior_model, samples, p: int) -> list[torch.Tensor]:
    """Stage-I prior for each sample, pooled to the latent grid."""
    prior_model.eval()
    return [pool_to_latent(prior_model.prior(s.sub), p) for s in samples]


def stage2_batch(model: AdaptedModel, clean, sub, m_prior, t, noise, k: int, cfg: Stage2Config, rng: torch.Generator | None) -> StageTwoBatchResult:
    """Every Stage-II term for one batch (``[B, T, H, W, 3]`` videos)."""
    p = model.latent_factor
    sched = model.sched
    z0 = latent_encode(clean, p)
    z_sub = latent_encode(sub, p)
    z_t = forward_diffuse(z0, t, noise, sched)
    eps_hat, m_pred = model(z_t, z_sub, t)
    m_used = blackout_augment(m_pred, cfg.blackout_prob, rng) if (rng is not None and cfg.blackout_prob > 0) else m_pred
    z0_hat = predict_z0(z_t, eps_hat, t, sched)
    with torch.no_grad():
        eps_gen = gen_error(latent_decode(z0_hat, p), clean, p)
    alpha = alpha_at(k, cfg.alpha)
    w = adaptive_weights(m_used, eps_gen, alpha, cfg.weights)
    l_gen = generation_loss(eps_hat, noise, w) if cfg.loss_space == "eps" else generation_loss(z0_hat, z0, w)
    return stage2_loss(
        distill_loss(m_pred, m_prior),
        l_gen,
        sparsity_loss(m_pred, m_prior),
        alpha=alpha,
        mean_mpred=m_pred.mean().item(),
        mean_epsgen=eps_gen.mean().item(),
    )


def build_adapted(base: Denoiser, cfg: Stage2Config, seed: int, sched: DiffusionSchedule = DiffusionSchedule()) -> AdaptedModel:
    reset_lora(base, seed, scale=cfg.lora_scale)
    head = init_head(base.cfg.dim, seed + 1)
    return AdaptedModel(base, head, sched, cfg.latent_factor)


def train_stage2(samples, prior_model, base: Denoiser, cfg: Stage2Config, seed: int, out_dir: str | Path | None = None):
    """Returns ``(model, log_records)``.  Only LoRA and head tensors are updated."""
    if base.cfg.lora_rank != cfg.lora_rank:
        raise ValueError(f"base built with LoRA rank {base.cfg.lora_rank}, config asks for {cfg.lora_rank}")
    model = build_adapted(base, cfg, seed)
    report = model.param_report()
    log.info("stage2 trainable_fraction %.4f (%d / %d)", report["trainable_fraction"], report["trainable_params"], report["total_params"])
    priors = prior_latent_maps(prior_model, samples, cfg.latent_factor)
    clean_all = torch.stack([s.clean for s in samples])
    sub_all = torch.stack([s.sub for s in samples])
    prior_all = torch.stack(priors)

    g = make_generator(seed + 2)
    aug_rng = make_generator(seed + 3)
    params = model.trainable_named()
    state = OptimState()
    sched = LrSchedule(cfg.lr, cfg.warmup_steps, max(cfg.steps, cfg.warmup_steps + 1))
    out_dir = Path(out_dir) if out_dir else None
    fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "params.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        fh = open(out_dir / "stage2_log.ndjson", "w")
    records = []
    saved = []
    try:
        for k in range(cfg.steps):
            idx = torch.randint(len(samples), (cfg.batch_size,), generator=g)
            t = torch.randint(1, model.sched.t_train + 1, (cfg.batch_size,), generator=g)
            noise = torch.randn((cfg.batch_size, *latent_shape(clean_all.shape[1:], cfg.latent_factor)), generator=g)
            model.zero_grad(set_to_none=True)
            res = stage2_batch(model, clean_all[idx], sub_all[idx], prior_all[idx], t, noise, k, cfg, aug_rng)
            if not torch.isfinite(res.total):
                bad = [n for n in ("l_distill", "l_gen", "l_sparse") if not torch.isfinite(getattr(res, n))]
                raise TrainingDiverged(f"non-finite stage-2 loss at step {k}: {bad}")
            res.total.backward()
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            _, gnorm = clip_grad_norm(grads.values(), cfg.clip_norm)
            lr = lr_at(k, sched)
            if lr > 0:
                adamw_step(params, grads, state, lr, weight_decay=cfg.weight_decay)
            rec = {
                "step": k,
                "alpha": res.alpha,
                "l_distill": res.l_distill.item(),
                "l_gen": res.l_gen.item(),
                "l_sparse": res.l_sparse.item(),
                "total": res.total.item(),
                "mean_mpred": res.mean_mpred,
                "mean_epsgen": res.mean_epsgen,
                "lr": lr,
                "grad_norm": gnorm,
            }
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if k % 100 == 0 or k == cfg.steps - 1:
                log.info("stage2 step %d total %.4f gen %.4f distill %.4f mpred %.3f", k, rec["total"], rec["l_gen"], rec["l_distill"], rec["mean_mpred"])
            if out_dir and cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
                saved.append(save_adapted(model, out_dir / f"ckpt_{k + 1:06d}", step=k + 1))
                while len(saved) > cfg.keep_checkpoints:
                    shutil.rmtree(saved.pop(0), ignore_errors=True)
    finally:
        if fh:
            fh.close()
    model.zero_grad(set_to_none=True)
    if out_dir:
        save_adapted(model, out_dir / "final", step=cfg.steps)
    return model, records


def latent_shape(video_shape, p: int) -> tuple[int, int, int, int]:
    T, H, W, C = video_shape
    return (T, H // p, W // p, C * p * p)
