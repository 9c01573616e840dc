"""Paired clean / subtitled synthetic videos with exact subtitle masks.

Videos are float32 tensors shaped ``[T, H, W, 3]`` with values in [0, 1].
Glyphs are procedural: random connected strokes on a small grid, so no font
files are needed.  Every sample is a pure function of ``(config, seed)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .numerics import TensorFileError, derive_seed, load_tensor, save_tensor

MIN_SIDE = 16


class DatasetError(IOError):
    pass


@dataclass
class SubtitleStyle:
    glyph_set: list[np.ndarray]
    font_scale: int = 2
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    alpha: float = 1.0
    position: str | tuple[int, int, int, int] = "bottom"  # or (top, left, height, width)
    jitter: int = 0
    segments: list[tuple[int, int, int]] = field(default_factory=list)  # (start, end, text_len)
    soft_edge: bool = True

    def validate(self, frames: int) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        if not self.glyph_set or any(not g.any() for g in self.glyph_set):
            raise ValueError("glyph bitmaps must be non-empty")
        if self.font_scale < 1:
            raise ValueError("font_scale must be >= 1")
        for start, end, n in self.segments:
            if not (0 <= start < end <= frames) or n < 1:
                raise ValueError(f"segment {(start, end, n)} outside [0, {frames})")

    def summary(self) -> dict:
        return {
            "n_glyphs": len(self.glyph_set),
            "font_scale": self.font_scale,
            "color": [round(c, 4) for c in self.color],
            "alpha": round(self.alpha, 4),
            "position": self.position if isinstance(self.position, str) else list(self.position),
            "jitter": self.jitter,
            "segments": [list(s) for s in self.segments],
            "soft_edge": self.soft_edge,
        }


@dataclass
class PairedSample:
    clean: torch.Tensor
    sub: torch.Tensor
    gt_mask: torch.Tensor
    style: dict = field(default_factory=dict)
    id: str = ""


# ---------------------------------------------------------------------------
# Clean background content


def gen_clean(width: int, height: int, frames: int, seed: int, motion: float = 1.0) -> torch.Tensor:
    """Temporally coherent moving content: drifting gradient, textured shapes, global pan."""
    if width < MIN_SIDE or height < MIN_SIDE:
        raise ValueError(f"width and height must be >= {MIN_SIDE}")
    if frames < 2:
        raise ValueError("need at least 2 frames")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    theta = rng.uniform(0, 2 * np.pi)
    drift = rng.uniform(-0.02, 0.02) * motion
    pan = rng.uniform(-1.0, 1.0, size=2) * motion  # pixels / frame
    tex_freq = rng.uniform(0.15, 0.5, size=2)
    tex_amp = rng.uniform(0.03, 0.1)

    n_shapes = int(rng.integers(2, 5))
    shapes = []
    for _ in range(n_shapes):
        shapes.append(
            dict(
                kind=int(rng.integers(0, 2)),
                cy=rng.uniform(0, height),
                cx=rng.uniform(0, width),
                r=rng.uniform(0.1, 0.25) * min(width, height),
                vel=rng.uniform(-1.5, 1.5, size=2) * motion,
                color=rng.uniform(0.0, 1.0, size=3),
                freq=rng.uniform(0.3, 1.0),
                phase=rng.uniform(0, 2 * np.pi),
            )
        )

    out = np.empty((frames, height, width, 3), dtype=np.float64)
    for t in range(frames):
        py, px = yy + pan[0] * t, xx + pan[1] * t
        s = (np.cos(theta) * px + np.sin(theta) * py) / max(width, height)
        s = (s + 0.5 + drift * t) % 2.0
        s = np.where(s > 1.0, 2.0 - s, s)[..., None]
        img = (1 - s) * c0 + s * c1
        img = img + tex_amp * (np.sin(tex_freq[0] * px) * np.sin(tex_freq[1] * py))[..., None]
        for sh in shapes:
            cy = sh["cy"] + sh["vel"][0] * t
            cx = sh["cx"] + sh["vel"][1] * t
            dy, dx = yy - cy, xx - cx
            if sh["kind"] == 0:
                inside = dy**2 + dx**2 <= sh["r"] ** 2
            else:
                inside = (np.abs(dy) <= sh["r"]) & (np.abs(dx) <= 0.7 * sh["r"])
            stripes = 0.5 + 0.5 * np.sin(sh["freq"] * (dx + dy) + sh["phase"])
            col = sh["color"] * (0.75 + 0.25 * stripes[..., None])
            img = np.where(inside[..., None], col, img)
        out[t] = img
    return torch.from_numpy(np.clip(out, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# Glyphs and styles


def make_glyph(rng: np.random.Generator, k: int = 5) -> np.ndarray:
    """Random connected strokes on a ``k x k`` grid (a 4-connected walk)."""
    g = np.zeros((k, k), dtype=bool)
    y, x = (int(v) for v in rng.integers(0, k, size=2))
    g[y, x] = True
    moves = ((0, 1), (0, -1), (1, 0), (-1, 0))
    for _ in range(int(rng.integers(k, 3 * k))):
        dy, dx = moves[int(rng.integers(0, 4))]
        y, x = min(max(y + dy, 0), k - 1), min(max(x + dx, 0), k - 1)
        g[y, x] = True
    return g


def random_style(frames: int, width: int, height: int, rng: np.random.Generator) -> SubtitleStyle:
    glyphs = [make_glyph(rng) for _ in range(8)]
    scale = int(rng.integers(1, 3))
    bright = rng.uniform() < 0.7
    color = tuple(float(c) for c in (rng.uniform(0.85, 1.0, 3) if bright else rng.uniform(0.8, 1.0) * np.array([1.0, 1.0, 0.2])))
    alpha = float(rng.uniform(0.6, 1.0))
    position = "bottom" if rng.uniform() < 0.8 else "top"
    max_len = max(1, (width - 4) // ((5 + 1) * scale))
    segments = []
    if frames >= 4 and rng.uniform() < 0.3:
        cut = int(rng.integers(1, frames))
        segments.append((0, cut, int(rng.integers(max(1, max_len // 2), max_len + 1))))
        segments.append((cut, frames, int(rng.integers(max(1, max_len // 2), max_len + 1))))
    else:
        segments.append((0, frames, int(rng.integers(max(1, max_len // 2), max_len + 1))))
    return SubtitleStyle(
        glyph_set=glyphs,
        font_scale=scale,
        color=color,
        alpha=alpha,
        position=position,
        jitter=int(rng.integers(0, 2)),
        segments=segments,
    )


def _render_line(glyphs: list[np.ndarray], scale: int) -> np.ndarray:
    k = glyphs[0].shape[0]
    cell = (k + 1) * scale
    line = np.zeros((k * scale, cell * len(glyphs)), dtype=bool)
    for i, g in enumerate(glyphs):
        big = np.kron(g, np.ones((scale, scale), dtype=bool))
        line[:, i * cell : i * cell + k * scale] = big
    return line


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def burn_subtitles(clean: torch.Tensor, style: SubtitleStyle, seed: int) -> PairedSample:
    """Alpha-blend rendered glyph lines into ``clean`` during active segments.

    Core glyph pixels blend with ``style.alpha``; the optional 1-pixel soft
    edge blends with half of it.  ``gt_mask`` is 1 exactly where the blend
    weight is nonzero, and ``sub`` equals ``clean`` bit-for-bit elsewhere.
    """
    T, H, W, _ = clean.shape
    style.validate(T)
    rng = np.random.default_rng(seed)
    a = np.zeros((T, H, W), dtype=np.float32)
    for start, end, n in style.segments:
        picks = rng.integers(0, len(style.glyph_set), size=n)
        line = _render_line([style.glyph_set[int(i)] for i in picks], style.font_scale)
        lh, lw = line.shape
        lw = min(lw, W)
        line = line[:, :lw]
        if isinstance(style.position, str):
            top = H - lh - max(2, H // 16) if style.position == "bottom" else max(2, H // 16)
            left = (W - lw) // 2
        else:
            top, left = style.position[0], style.position[1]
        for t in range(start, end):
            dy, dx = (rng.integers(-style.jitter, style.jitter + 1, size=2) if style.jitter else (0, 0))
            canvas = np.zeros((H, W), dtype=bool)
            y0, x0 = int(top + dy), int(left + dx)
            ys, xs = slice(max(y0, 0), min(y0 + lh, H)), slice(max(x0, 0), min(x0 + lw, W))
            canvas[ys, xs] = line[ys.start - y0 : ys.stop - y0, xs.start - x0 : xs.stop - x0]
            frame_a = np.where(canvas, style.alpha, 0.0)
            if style.soft_edge:
                edge = _dilate(canvas) & ~canvas
                frame_a = np.where(edge, 0.5 * style.alpha, frame_a)
            a[t] = np.maximum(a[t], frame_a)

    alpha = torch.from_numpy(a)
    mask = alpha > 0
    color = torch.tensor(style.color, dtype=torch.float32)
    blended = (1 - alpha[..., None]) * clean + alpha[..., None] * color
    sub = torch.where(mask[..., None], blended, clean)
    return PairedSample(clean=clean, sub=sub, gt_mask=mask.to(torch.float32), style=style.summary())


# ---------------------------------------------------------------------------
# Datasets


def make_sample(index: int, seed: int, width: int = 64, height: int = 64, frames: int = 8, motion: float = 1.0) -> PairedSample:
    s = derive_seed(seed, index)
    rng = np.random.default_rng(s)
    clean = gen_clean(width, height, frames, seed=int(rng.integers(2**62)), motion=motion)
    style = random_style(frames, width, height, rng)
    sample = burn_subtitles(clean, style, seed=int(rng.integers(2**62)))
    sample.id = f"s{index:05d}"
    return sample


def make_dataset(n: int, seed: int, width: int = 64, height: int = 64, frames: int = 8, start: int = 0) -> list[PairedSample]:
    return [make_sample(start + i, seed, width, height, frames) for i in range(n)]


def write_dataset(samples: list[PairedSample], directory: str | Path, export_ppm: bool = False) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        sdir = directory / s.id
        sdir.mkdir(exist_ok=True)
        save_tensor(sdir / "clean.clrt", s.clean)
        save_tensor(sdir / "sub.clrt", s.sub)
        save_tensor(sdir / "mask.clrt", s.gt_mask)
        if export_ppm:
            write_ppm_frames(s.sub, sdir / "sub_ppm")
            write_ppm_frames(s.clean, sdir / "clean_ppm")
        entries.append(
            {
                "id": s.id,
                "files": {"clean": f"{s.id}/clean.clrt", "sub": f"{s.id}/sub.clrt", "mask": f"{s.id}/mask.clrt"},
                "shape": list(s.clean.shape),
                "style": s.style,
            }
        )
    manifest = {"schema": 1, "count": len(entries), "samples": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_dataset(directory: str | Path) -> list[PairedSample]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"missing dataset manifest: {mpath}")
    manifest = json.loads(mpath.read_text())
    out = []
    for e in manifest["samples"]:
        try:
            clean = load_tensor(directory / e["files"]["clean"])
            sub = load_tensor(directory / e["files"]["sub"])
            mask = load_tensor(directory / e["files"]["mask"])
        except TensorFileError as exc:
            raise DatasetError(str(exc)) from exc
        out.append(PairedSample(clean=clean, sub=sub, gt_mask=mask, style=e.get("style", {}), id=e["id"]))
    if len(out) != manifest["count"]:
        raise DatasetError(f"manifest count {manifest['count']} != {len(out)} samples")
    return out


def write_ppm_frames(video: torch.Tensor, directory: str | Path) -> list[Path]:
    """Binary PPM (P6, maxval 255), one file per frame."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    frames = (video.clamp(0, 1) * 255.0 + 0.5).to(torch.uint8).numpy()
    for t, fr in enumerate(frames):
        p = directory / f"frame_{t:04d}.ppm"
        h, w, _ = fr.shape
        p.write_bytes(f"P6\n{w} {h}\n255\n".encode() + fr.tobytes())
        paths.append(p)
    return paths


def read_ppm_frames(directory: str | Path) -> torch.Tensor:
    frames = []
    for p in sorted(Path(directory).glob("*.ppm")):
        raw = p.read_bytes()
        parts = raw.split(maxsplit=4)
        if parts[0] != b"P6" or int(parts[3]) != 255:
            raise DatasetError(f"unsupported PPM file: {p}")
        w, h = int(parts[1]), int(parts[2])
        data = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
        frames.append(data.astype(np.float32) / 255.0)
    if not frames:
        raise DatasetError(f"no PPM frames in {directory}")
    return torch.from_numpy(np.stack(frames))
