import json

import numpy as np
import pytest
import torch

from clearsub.synthvideo import (
    DatasetError,
    SubtitleStyle,
    burn_subtitles,
    gen_clean,
    make_dataset,
    make_glyph,
    read_dataset,
    read_ppm_frames,
    write_dataset,
    write_ppm_frames,
)


def _style(**kw):
    rng = np.random.default_rng(0)
    base = dict(glyph_set=[make_glyph(rng) for _ in range(4)], font_scale=2, segments=[(0, 4, 3)])
    base.update(kw)
    return SubtitleStyle(**base)


def test_gen_clean_deterministic_and_ranged():
    a = gen_clean(32, 32, 4, seed=11)
    b = gen_clean(32, 32, 4, seed=11)
    assert a.numpy().tobytes() == b.numpy().tobytes()
    assert a.shape == (4, 32, 32, 3)
    assert a.min() >= 0 and a.max() <= 1
    assert not torch.equal(a, gen_clean(32, 32, 4, seed=12))


def test_gen_clean_slow_motion_is_coherent():
    v = gen_clean(64, 64, 8, seed=0, motion=0.25)
    assert (v[1:] - v[:-1]).abs().mean() < 0.1


def test_gen_clean_rejects_small():
    with pytest.raises(ValueError):
        gen_clean(8, 32, 4, seed=0)
    with pytest.raises(ValueError):
        gen_clean(32, 32, 1, seed=0)


def test_glyphs_nonempty_and_connected():
    rng = np.random.default_rng(1)
    for _ in range(20):
        g = make_glyph(rng)
        assert g.any()
        # flood fill from one set cell reaches all set cells
        ys, xs = np.nonzero(g)
        seen, stack = set(), [(ys[0], xs[0])]
        while stack:
            y, x = stack.pop()
            if (y, x) in seen or not (0 <= y < 5 and 0 <= x < 5) or not g[y, x]:
                continue
            seen.add((y, x))
            stack += [(y + 1, x), (y - 1, x), (y, x + 1), (y, x - 1)]
        assert len(seen) == g.sum()


def test_alpha_zero_is_identity():
    clean = gen_clean(32, 32, 4, seed=1)
    s = burn_subtitles(clean, _style(alpha=0.0), seed=0)
    assert torch.equal(s.sub, clean)
    assert s.gt_mask.sum() == 0


def test_opaque_white_glyph_pixels():
    clean = gen_clean(32, 32, 4, seed=1)
    s = burn_subtitles(clean, _style(alpha=1.0, soft_edge=False), seed=0)
    inside = s.gt_mask.bool()
    assert inside.any()
    assert torch.all(s.sub[inside] == 1.0)


def test_blend_arithmetic():
    clean = torch.full((2, 16, 16, 3), 0.2)
    s = burn_subtitles(clean, _style(alpha=0.5, soft_edge=False, segments=[(0, 2, 2)], font_scale=1), seed=0)
    inside = s.gt_mask.bool()
    torch.testing.assert_close(s.sub[inside], torch.full_like(s.sub[inside], 0.6))


def test_soft_edge_is_in_mask_with_half_alpha():
    clean = torch.zeros(2, 32, 32, 3)
    s = burn_subtitles(clean, _style(alpha=0.8, soft_edge=True, segments=[(0, 2, 2)]), seed=0)
    vals = set(np.round(s.sub[s.gt_mask.bool()][:, 0].double().numpy(), 5).tolist())
    assert vals == {0.4, 0.8}


def test_sub_equals_clean_outside_mask_over_dataset():
    for s in make_dataset(6, seed=4):
        outside = ~s.gt_mask.bool()
        assert torch.equal(s.sub[outside], s.clean[outside])
        assert set(torch.unique(s.gt_mask).tolist()) <= {0.0, 1.0}


def test_segments_respected():
    clean = gen_clean(32, 32, 6, seed=2)
    s = burn_subtitles(clean, _style(segments=[(2, 4, 2)]), seed=0)
    per_frame = s.gt_mask.sum(dim=(1, 2))
    assert per_frame[0] == 0 and per_frame[1] == 0 and per_frame[4] == 0
    assert per_frame[2] > 0 and per_frame[3] > 0


def test_style_validation():
    with pytest.raises(ValueError):
        _style(alpha=1.5).validate(4)
    with pytest.raises(ValueError):
        _style(segments=[(0, 9, 1)]).validate(4)
    with pytest.raises(ValueError):
        _style(glyph_set=[np.zeros((5, 5), bool)]).validate(4)


def test_dataset_pure_function_of_seed():
    a = make_dataset(3, seed=9)
    b = make_dataset(3, seed=9)
    for x, y in zip(a, b):
        assert torch.equal(x.sub, y.sub) and torch.equal(x.gt_mask, y.gt_mask)


def test_dataset_roundtrip(tmp_path):
    samples = make_dataset(3, seed=5, width=32, height=32, frames=4)
    manifest = write_dataset(samples, tmp_path / "d")
    assert manifest["count"] == 3
    on_disk = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert on_disk["count"] == len(on_disk["samples"]) == 3
    back = read_dataset(tmp_path / "d")
    for x, y in zip(samples, back):
        assert x.id == y.id
        for name in ("clean", "sub", "gt_mask"):
            assert getattr(x, name).numpy().tobytes() == getattr(y, name).numpy().tobytes()


def test_dataset_missing_mask_file(tmp_path):
    samples = make_dataset(2, seed=5, width=32, height=32, frames=4)
    write_dataset(samples, tmp_path / "d")
    (tmp_path / "d" / samples[1].id / "mask.clrt").unlink()
    with pytest.raises(DatasetError, match="missing tensor file"):
        read_dataset(tmp_path / "d")


def test_dataset_corrupt_magic(tmp_path):
    samples = make_dataset(1, seed=5, width=32, height=32, frames=4)
    write_dataset(samples, tmp_path / "d")
    p = tmp_path / "d" / samples[0].id / "sub.clrt"
    p.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(DatasetError, match="sub.clrt"):
        read_dataset(tmp_path / "d")


def test_ppm_roundtrip(tmp_path):
    v = gen_clean(16, 16, 2, seed=0)
    paths = write_ppm_frames(v, tmp_path / "ppm")
    assert len(paths) == 2 and paths[0].read_bytes().startswith(b"P6\n16 16\n255\n")
    back = read_ppm_frames(tmp_path / "ppm")
    assert (back - v).abs().max() <= 0.5 / 255 + 1e-6
