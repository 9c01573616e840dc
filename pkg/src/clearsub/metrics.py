"""PSNR, SSIM, temporal coherence, mask IoU and the JSON evaluation report."""

from __future__ import annotations

import json
import math

import torch
import torch.nn.functional as F

PSNR_CAP = 99.0
REPORT_SCHEMA = 1
SSIM_WINDOW = 8
C1 = 0.01**2
C2 = 0.03**2


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    _check(a, b)
    mse = float((a.double() - b.double()).pow(2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = SSIM_WINDOW) -> float:
    """Grayscale SSIM with uniform ``window x window`` (valid) windows, averaged over frames."""
    _check(a, b)
    T, H, W, _ = a.shape
    if H < window or W < window:
        raise ValueError(f"frame {H}x{W} smaller than the {window}x{window} window")
    x = a.double().mean(-1)[:, None]
    y = b.double().mean(-1)[:, None]

    def box(z):
        return F.avg_pool2d(z, window, stride=1)

    mx, my = box(x), box(y)
    vx = box(x * x) - mx * mx
    vy = box(y * y) - my * my
    cxy = box(x * y) - mx * my
    s = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
    return float(s.mean())


def temporal_coherence(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """Mean |d_pred(t) - d_gt(t)| with d(t) the mean abs change from frame t to t+1."""
    _check(pred, gt)
    if pred.shape[0] < 2:
        raise ValueError("temporal coherence needs at least 2 frames")

    def d(v):
        return (v[1:].double() - v[:-1].double()).abs().flatten(1).mean(1)

    return float((d(pred) - d(gt)).abs().mean())


def mask_iou(pred: torch.Tensor, gt: torch.Tensor, threshold: float = 0.5) -> float:
    """IoU of ``pred >= threshold`` against a binary ``gt``; empty union gives 1."""
    _check(pred, gt)
    p = pred >= threshold
    g = gt > 0.5
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def eval_report(preds, gts, ids=None, pred_masks=None, gt_masks=None) -> dict:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} references")
    ids = ids or [f"v{i:04d}" for i in range(len(preds))]
    per = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        row = {"id": ids[i], "psnr_db": psnr(p, g), "ssim": ssim(p, g), "tc": temporal_coherence(p, g)}
        if pred_masks is not None:
            row["iou"] = mask_iou(pred_masks[i], gt_masks[i])
        per.append(row)
    keys = ["psnr_db", "ssim", "tc"] + (["iou"] if pred_masks is not None else [])
    agg = {k: sum(r[k] for r in per) / len(per) for k in keys} if per else {k: float("nan") for k in keys}
    return {"schema": REPORT_SCHEMA, "aggregate": agg, "per_video": per}


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2)


def parse_report(text: str) -> dict:
    """Parse and validate a report produced by :func:`eval_report`."""
    rep = json.loads(text)
    if rep.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"unsupported report schema {rep.get('schema')!r}")
    for k in ("psnr_db", "ssim", "tc"):
        if not isinstance(rep["aggregate"].get(k), (int, float)):
            raise ValueError(f"aggregate.{k} missing")
    for row in rep["per_video"]:
        missing = {"id", "psnr_db", "ssim", "tc"} - set(row)
        if missing:
            raise ValueError(f"per_video row missing {sorted(missing)}")
    return rep
