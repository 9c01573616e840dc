import math

import pytest
import torch

from clearsub.diffusion import (
    DenoiserConfig,
    DiffusionSchedule,
    LoraLinear,
    ddim_step,
    dit_forward,
    forward_diffuse,
    init_denoiser,
    init_head,
    latent_decode,
    latent_encode,
    lora_linear,
    occlusion_predict,
    predict_z0,
    reset_lora,
)

SMALL = DenoiserConfig(dim=32, depth=2, heads=2, lora_rank=2, t_embed_dim=32)
SCHED = DiffusionSchedule()


def _lat(seed=0, T=2, h=4, w=4, c=48):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(T, h, w, c, generator=g)


# --- latent transform -------------------------------------------------------


def test_latent_roundtrip_and_shape():
    v = torch.rand(8, 64, 64, 3)
    z = latent_encode(v)
    assert z.shape == (8, 16, 16, 48)
    assert torch.equal(latent_decode(z), v)
    assert torch.equal(z.pow(2).sum(), v.pow(2).sum()) or math.isclose(z.pow(2).sum().item(), v.pow(2).sum().item(), rel_tol=1e-6)
    assert sorted(z.flatten().tolist()) == sorted(v.flatten().tolist())


def test_latent_rejects_indivisible():
    with pytest.raises(ValueError):
        latent_encode(torch.rand(2, 30, 32, 3))


def test_latent_patch_layout():
    v = torch.arange(2 * 4 * 4 * 3, dtype=torch.float32).view(2, 4, 4, 3)
    z = latent_encode(v, p=2)
    # token (0,0) holds the 2x2 top-left patch, row-major, channels innermost
    expected = torch.cat([v[0, 0, 0], v[0, 0, 1], v[0, 1, 0], v[0, 1, 1]])
    assert torch.equal(z[0, 0, 0], expected)


# --- schedule ---------------------------------------------------------------


def test_schedule_properties():
    ab = SCHED.alpha_bar
    assert ab[0] == 1.0
    assert torch.all(ab[1:] < ab[:-1])
    assert torch.all(ab > 0)
    assert SCHED.betas[0].item() == pytest.approx(1e-4) and SCHED.betas[-1].item() == pytest.approx(0.02)


def test_timesteps():
    assert SCHED.timesteps() == [1000, 800, 600, 400, 200, 0]
    assert SCHED.timesteps(1) == [1000, 0]
    assert DiffusionSchedule(t_train=10).timesteps(3) == [10, 7, 4, 0]
    with pytest.raises(ValueError):
        SCHED.timesteps(0)


# --- forward diffusion ------------------------------------------------------


def test_forward_diffuse_boundaries():
    z0, n = _lat(0), _lat(1)
    assert torch.equal(forward_diffuse(z0, 0, n, SCHED), z0)
    far = forward_diffuse(z0, 1000, n, SCHED)
    assert (far - n).abs().max() < 0.05
    with pytest.raises(ValueError):
        forward_diffuse(z0, 1001, n, SCHED)
    with pytest.raises(ValueError):
        forward_diffuse(z0, 5, n[:1], SCHED)


def test_forward_diffuse_monte_carlo():
    g = torch.Generator().manual_seed(7)
    z0 = torch.tensor([0.8, -0.3, 1.5], dtype=torch.float64)
    t = 300
    ab = SCHED.alpha_bar[t].item()
    noise = torch.randn(10_000, 3, generator=g, dtype=torch.float64)
    zt = forward_diffuse(z0.expand(10_000, 3), t, noise, SCHED)
    se = math.sqrt((1 - ab) / 10_000)
    assert torch.all((zt.mean(0) - math.sqrt(ab) * z0).abs() < 3 * se)
    var_se = (1 - ab) * math.sqrt(2 / 9_999)
    assert torch.all((zt.var(0) - (1 - ab)).abs() < 3 * var_se)
    e_norm = zt.pow(2).sum(1).mean().item()
    assert e_norm == pytest.approx(ab * z0.pow(2).sum().item() + (1 - ab) * 3, rel=0.03)


# --- DDIM -------------------------------------------------------------------


def test_ddim_oracle_recovers_z0():
    # 64-bit: at t=1000 the 1/sqrt(ab) ~ 157 gain exceeds float32 resolution
    z0, n = _lat(0).double(), _lat(1).double()
    for t in (1, 200, 600, 1000):
        zt = forward_diffuse(z0, t, n, SCHED)
        assert (ddim_step(zt, n, t, 0, SCHED) - z0).abs().max() < 1e-5
    z0, n = _lat(0), _lat(1)
    for t in (1, 200, 600):
        zt = forward_diffuse(z0, t, n, SCHED)
        assert (ddim_step(zt, n, t, 0, SCHED) - z0).abs().max() < 1e-5


def test_ddim_zero_eps():
    zt = _lat(2)
    ab = SCHED.alpha_bar[400].item()
    torch.testing.assert_close(ddim_step(zt, torch.zeros_like(zt), 400, 0, SCHED), zt / math.sqrt(ab))


def test_ddim_two_step_matches_one_step():
    z0, n = _lat(0).double(), _lat(1).double()
    zt = forward_diffuse(z0, 1000, n, SCHED)
    one = ddim_step(zt, n, 1000, 0, SCHED)
    mid = ddim_step(zt, n, 1000, 500, SCHED)
    two = ddim_step(mid, n, 500, 0, SCHED)
    assert (one - two).abs().max() < 1e-4


def test_ddim_rejects_nonmonotone():
    z = _lat(0)
    with pytest.raises(ValueError):
        ddim_step(z, z, 200, 400, SCHED)
    with pytest.raises(ValueError):
        ddim_step(z, z, 200, 200, SCHED)


# --- LoRA -------------------------------------------------------------------


def test_lora_zero_b_and_zero_scale():
    layer = LoraLinear(6, 5, rank=2)
    torch.nn.init.normal_(layer.weight)
    torch.nn.init.normal_(layer.lora_A)
    x = torch.randn(3, 6)
    base = torch.nn.functional.linear(x, layer.weight, layer.bias)
    assert torch.equal(lora_linear(x, layer), base)
    torch.nn.init.normal_(layer.lora_B)
    layer.scale = 0.0
    assert torch.equal(lora_linear(x, layer), base)


def test_lora_dense_oracle():
    layer = LoraLinear(2, 2, rank=1, bias=False)
    with torch.no_grad():
        layer.weight.copy_(torch.tensor([[1.0, 2.0], [3.0, 4.0]]))
        layer.lora_A.copy_(torch.tensor([[1.0, -1.0]]))
        layer.lora_B.copy_(torch.tensor([[2.0], [0.5]]))
    layer.scale = 0.5
    x = torch.tensor([[1.0, 3.0]])
    W = torch.tensor([[1.0, 2.0], [3.0, 4.0]]) + 0.5 * torch.tensor([[2.0, -2.0], [0.5, -0.5]])
    torch.testing.assert_close(lora_linear(x, layer), x @ W.T)
    torch.testing.assert_close(layer.effective_weight(), W)


def test_lora_rank_validation():
    with pytest.raises(ValueError):
        LoraLinear(3, 8, rank=4)


# --- denoiser ---------------------------------------------------------------


def test_dit_forward_contract():
    model = init_denoiser(SMALL, seed=0)
    with torch.no_grad():
        for n, p in model.named_parameters():
            if n.startswith(("out.", "final_ada.")) or ".ada." in n:
                p.normal_(0, 0.1)
    zt, zs = _lat(0), _lat(1)
    eps, h = dit_forward(zt, zs, 500, model, SCHED)
    assert eps.shape == zt.shape
    assert h.shape == (2, 4, 4, SMALL.dim)
    eps2, _ = dit_forward(zt, zs, 100, model, SCHED)
    assert not torch.equal(eps, eps2)
    with pytest.raises(ValueError):
        dit_forward(zt, zs[:1], 500, model, SCHED)


def test_output_is_residual_on_sub_at_init():
    model = init_denoiser(SMALL, seed=0)
    zt, zs = _lat(0), _lat(1)
    eps, _ = dit_forward(zt, zs, 300, model, SCHED)
    torch.testing.assert_close(predict_z0(zt, eps, 300, SCHED), zs, atol=1e-4, rtol=1e-4)


def test_lora_identity_model_level():
    model = init_denoiser(SMALL, seed=0)
    with torch.no_grad():
        for n, p in model.named_parameters():
            if ".lora_" not in n:
                p.add_(0.05 * torch.randn_like(p))
    ref = {k: v.clone() for k, v in model.state_dict().items()}
    zt, zs = _lat(0), _lat(1)
    base_out, base_h = dit_forward(zt, zs, 700, model, SCHED)
    reset_lora(model, seed=9)
    out, h = dit_forward(zt, zs, 700, model, SCHED)
    assert torch.equal(out, base_out) and torch.equal(h, base_h)
    for k, v in model.state_dict().items():
        if ".lora_A" not in k:
            assert torch.equal(v, ref[k]), k


def test_init_deterministic():
    a = init_denoiser(SMALL, seed=4).state_dict()
    b = init_denoiser(SMALL, seed=4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_lora_targets():
    model = init_denoiser(SMALL, seed=0)
    names = {n.rsplit(".", 1)[0] for n, _ in model.named_parameters() if n.endswith("lora_A")}
    per_block = {n.split(".", 2)[2] for n in names}
    assert per_block == {"attn.q", "attn.k", "attn.v", "attn.o", "ffn.0", "ffn.2"}


# --- occlusion head ---------------------------------------------------------


def test_head_zero_is_half_and_shape():
    head = init_head(SMALL.dim, seed=0)
    h = torch.randn(3, 4, 4, SMALL.dim)
    m = occlusion_predict(h, head)
    assert m.shape == (3, 4, 4)
    assert torch.all((m > 0) & (m < 1))
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    assert torch.all(occlusion_predict(h, head) == 0.5)
    assert head.n_params() == SMALL.dim * 64 * 9 + 64 + 64 + 1
    with pytest.raises(ValueError):
        occlusion_predict(torch.randn(1, 4, 4, 7), head)
