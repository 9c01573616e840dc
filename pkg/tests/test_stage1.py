import math

import pytest
import torch

from clearsub.numerics import grad_check
from clearsub.stage1 import (
    STAGE1_WEIGHTS,
    Stage1Config,
    adv_loss_from_probs,
    encode_pair,
    init_prior_model,
    load_prior,
    ortho_loss,
    pixel_diff,
    predict_prior,
    pseudo_labels,
    recon_mse,
    region_loss,
    save_prior,
    stage1_forward,
    stage1_loss,
    threshold_mask,
    train_stage1,
)
from clearsub.synthvideo import make_dataset


def test_pixel_diff_examples():
    a = torch.zeros(1, 2, 2, 3)
    assert torch.equal(pixel_diff(a, a), torch.zeros(1, 2, 2))
    b = a.clone()
    b[0, 0, 0] = torch.tensor([0.3, 0.0, 0.0])
    b[0, 1, 1] = torch.tensor([0.3, 0.4, 0.0])
    d = pixel_diff(b, a)
    assert d[0, 0, 0].item() == pytest.approx(0.3)
    assert d[0, 1, 1].item() == pytest.approx(0.5)
    assert d[0, 0, 1] == 0 and d[0, 1, 0] == 0
    with pytest.raises(ValueError):
        pixel_diff(a, torch.zeros(1, 2, 3, 3))


def test_threshold_constant_map_is_empty():
    assert threshold_mask(torch.full((2, 5, 5), 0.7)).sum() == 0


def test_threshold_single_spike():
    d = torch.zeros(1, 4, 4)
    d[0, 2, 1] = 1.0
    mu, sigma = 1 / 16, math.sqrt(15) / 16
    assert 1.0 > mu + sigma
    m = threshold_mask(d)
    assert m.sum() == 1 and m[0, 2, 1] == 1


def test_threshold_ramp_against_enumeration():
    vals = [i / 15 for i in range(16)]
    mu = sum(vals) / 16
    sigma = math.sqrt(sum((v - mu) ** 2 for v in vals) / 16)
    expected = torch.tensor([[1.0 if v > mu + sigma else 0.0 for v in vals]]).view(1, 4, 4)
    assert torch.equal(threshold_mask(torch.tensor(vals).view(1, 4, 4)), expected)


def test_pseudo_labels_shift_invariant():
    s = make_dataset(1, seed=2, width=32, height=32, frames=4)[0]
    shift = torch.rand(1, 32, 32, 3) * 0.1
    a = pseudo_labels(s.sub, s.clean)
    b = pseudo_labels(s.sub + shift, s.clean + shift)
    # float addition is not exactly shift-invariant, so compare on the exact diff
    assert torch.equal(a, threshold_mask(pixel_diff(s.sub, s.clean)))
    assert (a != b).float().mean() < 0.01


def test_encode_pair_shapes_and_zero_init():
    model = init_prior_model(8, seed=0)
    v = torch.rand(2, 64, 64, 3)
    fs, fc = encode_pair(v, v, model)
    assert fs.shape == fc.shape == (2, 8, 8, 8)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    fs, fc = encode_pair(v, v, model)
    assert torch.all(fs == 0) and torch.all(fc == 0)
    with pytest.raises(ValueError):
        encode_pair(torch.rand(1, 20, 64, 3), torch.rand(1, 20, 64, 3), model)


def test_ortho_loss_examples():
    f = torch.randn(2, 3, 2, 2)
    assert ortho_loss(f, torch.zeros_like(f)) == 0
    u = torch.zeros(1, 3, 2, 2)
    u[:, 1] = 1.0
    assert ortho_loss(u, u).item() == pytest.approx(1.0)
    a = torch.tensor([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    b = torch.tensor([[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]])
    fa = a.T.reshape(1, 3, 1, 2)
    fb = b.T.reshape(1, 3, 1, 2)
    dots = [sum(x * y for x, y in zip(ra, rb)) for ra, rb in zip(a.tolist(), b.tolist())]
    assert ortho_loss(fa, fb).item() == pytest.approx(sum(d * d for d in dots) / 2)


def test_adv_loss_examples():
    half = torch.full((4,), 0.5)
    assert adv_loss_from_probs(half, half).item() == pytest.approx(2 * math.log(2), rel=1e-6)
    d = adv_loss_from_probs(torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64)).item()
    assert d == pytest.approx(2e-7, rel=1e-2)
    lo = adv_loss_from_probs(torch.zeros(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64)).item()
    assert lo == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_predict_prior_zero_decoder_and_shape():
    model = init_prior_model(8, seed=0)
    with torch.no_grad():
        for p in model.mask_decoder.parameters():
            p.zero_()
    fs = torch.randn(3, 8, 4, 4)
    m = predict_prior(fs, model)
    assert m.shape == (3, 32, 32)
    assert torch.all(m == 0.5)


def test_prior_ignores_clean_video():
    model = init_prior_model(8, seed=1)
    s = make_dataset(1, seed=0, width=32, height=32, frames=2)[0]
    fs, _ = encode_pair(s.sub, s.clean, model)
    fs2, _ = encode_pair(s.sub, torch.rand_like(s.clean), model)
    assert torch.equal(predict_prior(fs, model), predict_prior(fs2, model))


def test_region_loss_examples():
    assert region_loss(torch.full((5,), 0.5), torch.tensor([0, 1, 0, 1, 1.0])).item() == pytest.approx(math.log(2), rel=1e-6)
    m = torch.tensor([0.9, 0.1, 0.8, 0.2], dtype=torch.float64)
    y = torch.tensor([1, 0, 1, 0], dtype=torch.float64)
    expected = (-math.log(0.9) * 2 - math.log(0.8) * 2) / 4
    assert region_loss(m, y).item() == pytest.approx(expected, rel=1e-12)
    assert region_loss(torch.tensor([1.0, 0.0], dtype=torch.float64), torch.tensor([1.0, 0.0], dtype=torch.float64)) < 1e-6


def test_recon_mse_examples():
    x = torch.rand(2, 4, 4, 3)
    assert recon_mse(x, x) == 0
    assert recon_mse(x + 0.1, x).item() == pytest.approx(0.01, rel=1e-4)


def test_recon_mse_against_direct_sum():
    gen = torch.Generator().manual_seed(0)
    r = torch.rand(2, 3, 3, 3, generator=gen, dtype=torch.float64)
    c = torch.rand(2, 3, 3, 3, generator=gen, dtype=torch.float64)
    direct = sum((a - b) ** 2 for a, b in zip(r.flatten().tolist(), c.flatten().tolist())) / r.numel()
    assert recon_mse(r, c).item() == pytest.approx(direct, rel=1e-12)


def test_stage1_loss_weights():
    assert stage1_loss(1.0, 2.0, 3.0, 4.0).total.item() == pytest.approx(5.4)
    assert stage1_loss(0.0, 0.0, 0.0, 0.0).total.item() == 0
    assert stage1_loss(0.0, 0.0, math.log(2), 0.0).total.item() == pytest.approx(math.log(2))
    assert STAGE1_WEIGHTS == {"l_ortho": 1.0, "l_adv": 0.5, "l_region": 1.0, "l_recon": 0.1}
    with pytest.raises(ValueError, match="l_adv"):
        stage1_loss(0.0, float("inf"), 0.0, 0.0)


def test_stage1_loss_gradcheck_small():
    torch.manual_seed(0)
    model = init_prior_model(4, seed=0).double()
    s = make_dataset(1, seed=1, width=16, height=16, frames=2)[0]
    sub, clean = s.sub.double(), s.clean.double()
    pseudo = pseudo_labels(sub, clean).double()
    params = [model.mask_decoder.net[-1].weight, model.recon_decoder.net[-1].bias,
              model.discriminator.net[-1].weight, model.sub_encoder.net[-1].bias, model.content_encoder.net[-1].bias]
    for p in params:
        p.requires_grad_(True)
    rep = grad_check(lambda: stage1_forward(model, sub, clean, pseudo).total, params, max_entries=40)
    assert rep.max_rel_err < 1e-4


def test_train_stage1_zero_steps_is_init():
    ds = make_dataset(2, seed=0, width=16, height=16, frames=2)
    model, hist = train_stage1(ds, Stage1Config(steps=0, channels=4), seed=3)
    ref = init_prior_model(4, seed=3)
    assert hist == []
    for (n, a), (_, b) in zip(model.state_dict().items(), ref.state_dict().items()):
        assert torch.equal(a, b), n


def test_train_stage1_first_record_matches_init(tmp_path):
    ds = make_dataset(2, seed=0, width=16, height=16, frames=2)
    cfg = Stage1Config(steps=2, channels=4, clips_per_step=1, warmup_steps=1, lr=1e-3)
    _, hist = train_stage1(ds, cfg, seed=5, log_path=tmp_path / "log.ndjson")
    lines = (tmp_path / "log.ndjson").read_text().splitlines()
    assert len(lines) == 2
    assert set(hist[0]) == {"step", "l_ortho", "l_adv", "l_region", "l_recon", "total"}
    # replay batch 0 on a fresh init
    from clearsub.numerics import make_generator

    g = make_generator(6)
    i = torch.randint(len(ds), (1,), generator=g).item()
    ref = init_prior_model(4, seed=5)
    rep = stage1_forward(ref, ds[i].sub, ds[i].clean, pseudo_labels(ds[i].sub, ds[i].clean))
    assert hist[0]["total"] == pytest.approx(rep.total.item(), rel=1e-6)


def test_train_stage1_deterministic_and_roundtrip(tmp_path):
    ds = make_dataset(2, seed=0, width=16, height=16, frames=2)
    cfg = Stage1Config(steps=3, channels=4, warmup_steps=1, lr=1e-3)
    a, ha = train_stage1(ds, cfg, seed=1)
    b, hb = train_stage1(ds, cfg, seed=1)
    assert ha == hb
    save_prior(a, tmp_path / "p")
    c = load_prior(tmp_path / "p")
    for (n, x), (_, y) in zip(a.state_dict().items(), c.state_dict().items()):
        assert torch.equal(x, y), n
    assert torch.equal(a.prior(ds[0].sub), c.prior(ds[0].sub))
