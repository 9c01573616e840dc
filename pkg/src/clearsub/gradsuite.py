"""Finite-difference verification of every training loss in float64.

Each case builds a tiny instance, then compares autograd gradients with
central differences through :func:`clearsub.numerics.grad_check`.
"""

from __future__ import annotations

import time

import torch

from .diffusion import (
    DenoiserConfig,
    DiffusionSchedule,
    forward_diffuse,
    init_denoiser,
    init_head,
    latent_decode,
    latent_encode,
    predict_z0,
)
from .numerics import grad_check, make_generator
from .stage1 import (
    adv_loss,
    encode_pair,
    init_prior_model,
    ortho_loss,
    predict_prior,
    pseudo_labels,
    recon_loss,
    region_loss,
    stage1_forward,
)
from .stage2 import (
    AdaptedModel,
    Stage2Config,
    adaptive_weights,
    distill_loss,
    gen_error,
    generation_loss,
    sparsity_loss,
    stage2_batch,
    stage2_loss,
)
from .synthvideo import make_dataset

TOLERANCE = 1e-4


def _stage1_case(seed: int):
    s = make_dataset(1, seed=seed, width=16, height=16, frames=2)[0]
    model = init_prior_model(4, seed=seed).double()
    sub, clean = s.sub.double(), s.clean.double()
    return model, sub, clean, pseudo_labels(sub, clean).double()


def _tail_params(model) -> list[torch.Tensor]:
    """Last layer of every Stage-I network (small enough to probe densely)."""
    return [
        model.sub_encoder.net[-1].bias,
        model.content_encoder.net[-1].bias,
        model.mask_decoder.net[-1].weight,
        model.recon_decoder.net[-1].bias,
        model.discriminator.net[-1].weight,
    ]


def stage1_cases(seed: int = 0) -> dict:
    model, sub, clean, pseudo = _stage1_case(seed)
    g = make_generator(seed)
    fs = torch.randn(2, 4, 2, 2, generator=g, dtype=torch.float64).requires_grad_(True)
    fc = torch.randn(2, 4, 2, 2, generator=g, dtype=torch.float64).requires_grad_(True)
    m = torch.rand(2, 16, 16, generator=g, dtype=torch.float64).mul(0.98).add(0.01).requires_grad_(True)
    tails = _tail_params(model)
    disc = list(model.discriminator.parameters())
    return {
        "ortho": (lambda: ortho_loss(fs, fc), [fs, fc]),
        "adv": (lambda: adv_loss(fs, fc, model.discriminator), [fs, fc, *disc]),
        "region": (lambda: region_loss(m, pseudo), [m]),
        "recon": (lambda: recon_loss(fc, model, clean), [fc, model.recon_decoder.net[-1].weight]),
        "prior_decoder": (lambda: region_loss(predict_prior(encode_pair(sub, clean, model)[0], model), pseudo), [model.mask_decoder.net[-1].weight]),
        "stage1_total": (lambda: stage1_forward(model, sub, clean, pseudo).total, tails),
    }


def stage2_cases(seed: int = 0) -> dict:
    g = make_generator(seed)
    T, h, w, c = 2, 3, 3, 6
    m_pred = torch.rand(T, h, w, generator=g, dtype=torch.float64).mul(0.9).add(0.05).requires_grad_(True)
    m_prior = torch.rand(T, h, w, generator=g, dtype=torch.float64).mul(0.9).add(0.05)
    eps_gen = torch.rand(T, h, w, generator=g, dtype=torch.float64) * 0.2
    eps_hat = torch.randn(T, h, w, c, generator=g, dtype=torch.float64).requires_grad_(True)
    eps = torch.randn(T, h, w, c, generator=g, dtype=torch.float64)

    # a tiny adapted model so the full batch objective can be probed end to end
    cfg = DenoiserConfig(latent_channels=48, dim=16, depth=2, heads=2, lora_rank=2, t_embed_dim=16)
    base = init_denoiser(cfg, seed)
    with torch.no_grad():
        for n, p in base.named_parameters():
            if ".lora_" in n:
                continue
            p.add_(0.05 * torch.randn(p.shape, generator=g))
    base = base.double()
    model = AdaptedModel(base, init_head(cfg.dim, seed + 1).double(), DiffusionSchedule(), latent_factor=4)
    with torch.no_grad():
        for layer in base.lora_layers():
            layer.lora_B.copy_(0.05 * torch.randn(layer.lora_B.shape, generator=g, dtype=torch.float64))
    s = make_dataset(1, seed=seed, width=16, height=16, frames=2)[0]
    clean, sub = s.clean.double()[None], s.sub.double()[None]
    prior_lat = torch.rand(1, 2, 4, 4, generator=g, dtype=torch.float64).mul(0.9).add(0.05)
    t = torch.tensor([137])
    noise = torch.randn(1, 2, 4, 4, 48, generator=g, dtype=torch.float64)
    s2cfg = Stage2Config(blackout_prob=0.0)
    blk = base.blocks[0]
    # eps_gen is a non-differentiated weight input, so the full batch objective
    # is probed through the head only (the head does not move eps_hat) ...
    head_params = [model.head.conv1.bias, model.head.conv2.weight, model.head.conv2.bias]
    # ... and the LoRA path with eps_gen frozen at its base-point value.
    with torch.no_grad():
        z_t0 = forward_diffuse(latent_encode(clean), t, noise, model.sched)
        eps_hat0, _ = model(z_t0, latent_encode(sub), t)
        eps_gen0 = gen_error(latent_decode(predict_z0(z_t0, eps_hat0, t, model.sched)), clean)

    def lora_path():
        e, m = model(z_t0, latent_encode(sub), t)
        return stage2_loss(distill_loss(m, prior_lat), generation_loss(e, noise, adaptive_weights(m, eps_gen0, 9.0)), sparsity_loss(m, prior_lat)).total

    return {
        "distill": (lambda: distill_loss(m_pred, m_prior), [m_pred]),
        "generation": (lambda: generation_loss(eps_hat, eps, adaptive_weights(m_pred, eps_gen, 9.0)), [eps_hat, m_pred]),
        "sparsity": (lambda: sparsity_loss(m_pred, m_prior), [m_pred]),
        "stage2_total": (lambda: stage2_batch(model, clean, sub, prior_lat, t, noise, 7, s2cfg, None).total, head_params),
        "stage2_lora_path": (lora_path, [blk.attn.q.lora_B, blk.attn.v.lora_A, blk.ffn[2].lora_B, model.head.conv1.weight]),
    }


def run_suite(seed: int = 0, max_entries: int = 24) -> dict:
    """Returns ``{name: {max_rel_err, n_checked, passed}, ..., "passed": bool, "seconds": float}``."""
    t0 = time.perf_counter()
    out: dict = {}
    cases = {**stage1_cases(seed), **stage2_cases(seed)}
    for name, (fn, params) in cases.items():
        params = [p.requires_grad_(True) for p in params]
        rep = grad_check(fn, params, max_entries=max_entries)
        out[name] = {"max_rel_err": rep.max_rel_err, "n_checked": rep.n_checked, "passed": rep.max_rel_err < TOLERANCE}
    out["passed"] = all(v["passed"] for v in out.values() if isinstance(v, dict))
    out["seconds"] = time.perf_counter() - t0
    return out
