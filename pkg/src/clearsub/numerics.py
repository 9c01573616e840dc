"""Tensor substrate: container files, AdamW, LR schedule, clipping, grad checks.

Arrays are ``torch.Tensor`` (float32 for training, float64 for gradient
checks).  Randomness always flows through an explicit ``torch.Generator``
(Mersenne Twister MT19937) or ``numpy.random.Generator`` (PCG64); nothing here
touches global RNG state.
"""

from __future__ import annotations

import json
import math
import struct
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CLRT"
FORMAT_VERSION = 1
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1, torch.uint8: 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_NP_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


class TensorFileError(IOError):
    pass


class GradCheckError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# RNG helpers


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return g


def derive_seed(master: int, *path: int) -> int:
    """Stable 63-bit child seed for ``(master, *path)`` via numpy SeedSequence."""
    ss = np.random.SeedSequence([int(master) & 0xFFFF_FFFF_FFFF_FFFF, *map(int, path)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------------------
# Tensor container files


def save_tensor(path: str | Path, tensor: torch.Tensor) -> None:
    t = tensor.detach().cpu().contiguous()
    if t.dtype not in _DTYPE_CODES:
        t = t.to(torch.float32)
    code = _DTYPE_CODES[t.dtype]
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, t.dim())
    header += struct.pack(f"<{t.dim()}Q", *t.shape) + struct.pack("<I", code)
    payload = t.numpy().astype(_NP_DTYPES[code], copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def load_tensor(path: str | Path) -> torch.Tensor:
    path = Path(path)
    if not path.exists():
        raise TensorFileError(f"missing tensor file: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise TensorFileError(f"bad magic bytes in {path}")
    try:
        version, rank = struct.unpack_from("<II", raw, 4)
        off = 12
        shape = struct.unpack_from(f"<{rank}Q", raw, off)
        off += 8 * rank
        (code,) = struct.unpack_from("<I", raw, off)
        off += 4
    except struct.error as exc:
        raise TensorFileError(f"truncated header in {path}") from exc
    if version != FORMAT_VERSION:
        raise TensorFileError(f"unsupported format version {version} in {path}")
    if code not in _CODE_DTYPES:
        raise TensorFileError(f"unknown dtype code {code} in {path}")
    dt = _NP_DTYPES[code]
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(raw) - off != n * dt.itemsize:
        raise TensorFileError(
            f"truncated payload in {path}: expected {n * dt.itemsize} bytes, got {len(raw) - off}"
        )
    arr = np.frombuffer(raw, dtype=dt, offset=off, count=n).reshape(shape)
    return torch.from_numpy(arr.copy())


def save_checkpoint(directory: str | Path, tensors: Mapping[str, torch.Tensor], meta: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one container file per named tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        fname = name.replace("/", "__").replace(".", "_") + ".clrt"
        save_tensor(directory / fname, tensors[name])
        entries[name] = {"file": fname, "shape": list(tensors[name].shape)}
    manifest = {"schema": 1, "tensors": entries}
    if meta:
        manifest["meta"] = meta
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise TensorFileError(f"missing checkpoint manifest: {mpath}")
    manifest = json.loads(mpath.read_text())
    out = {}
    for name, entry in manifest["tensors"].items():
        t = load_tensor(directory / entry["file"])
        if list(t.shape) != entry["shape"]:
            raise TensorFileError(f"shape mismatch for {name} in {directory}")
        out[name] = t
    return out, manifest.get("meta", {})


def tensor_digest(tensors: Mapping[str, torch.Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Optimisation


@dataclass
class OptimState:
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


@torch.no_grad()
def adamw_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: OptimState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[Mapping[str, torch.Tensor], OptimState]:
    """One AdamW update, applied in place to ``params``.

    Weight decay is decoupled: ``p <- p * (1 - lr * wd)`` happens before the
    bias-corrected Adam step.  Every grad is validated before any parameter is
    touched, so a rejected call leaves params and state unchanged.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"grad shape {tuple(g.shape)} != param shape {tuple(p.shape)} for {name!r}")
        if not torch.isfinite(g).all():
            raise ValueError(f"non-finite gradient for parameter {name!r}")

    b1, b2 = betas
    state.step += 1
    k = state.step
    bc1 = 1.0 - b1**k
    bc2 = 1.0 - b2**k
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.exp_avg:
            state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.warmup_steps < 0 or self.total_steps <= self.warmup_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


def lr_at(step: int, sched: LrSchedule) -> float:
    """Linear warmup from 0, then half-cosine to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    if step >= sched.total_steps:
        return 0.0
    progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@torch.no_grad()
def clip_grad_norm(grads: Iterable[torch.Tensor], max_norm: float) -> tuple[list[torch.Tensor], float]:
    """Scale grads in place so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    grads = [g for g in grads if g is not None]
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return grads, total


# ---------------------------------------------------------------------------
# Finite-difference gradient checks


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: int
    worst_index: tuple
    n_checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: list[torch.Tensor],
    eps: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn()`` against central differences.

    ``params`` must be float64 leaf tensors with ``requires_grad``.  The
    relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.  When
    ``max_entries`` is set, only that many evenly strided entries per
    parameter are probed.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("grad_check requires float64 parameters")
        p.grad = None
    out = fn()
    if not torch.isfinite(out):
        raise GradCheckError("non-finite function value at the base point")
    analytic = torch.autograd.grad(out, params, allow_unused=True)

    worst = (0.0, -1, ())
    n = 0
    with torch.no_grad():
        for pi, (p, ga) in enumerate(zip(params, analytic)):
            if ga is None:
                ga = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = ga.reshape(-1)
            idxs = range(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                stride = flat.numel() / max_entries
                idxs = sorted({int(i * stride) for i in range(max_entries)})
            for i in idxs:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = fn().item()
                flat[i] = orig - eps
                fm = fn().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise GradCheckError(f"non-finite function value at param {pi}, entry {i}")
                num = (fp - fm) / (2 * eps)
                a = gflat[i].item()
                rel = abs(a - num) / max(abs(a), abs(num), floor)
                n += 1
                if rel > worst[0]:
                    worst = (rel, pi, tuple(np.unravel_index(i, tuple(p.shape))))
    return GradCheckReport(worst[0], worst[1], worst[2], n)
