"""Command-line entry point: ``clearsub <subcommand> [flags]``.

Subcommands: synth, pretrain, stage1, stage2, infer, eval, gradcheck, demo.
Config precedence is flags > ``--config`` JSON (section named after the
subcommand) > built-in defaults.  Logs go to stderr; machine-readable
results (one JSON object) go to stdout.  Exit codes: 0 ok, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import torch

from . import __version__
from .diffusion import DenoiserConfig
from .inference import InferenceConfig, export_debug_masks, remove_subtitles
from .metrics import dumps_report, eval_report, mask_iou
from .numerics import load_tensor, save_tensor
from .pretrain import PretrainConfig, pretrain_base
from .stage1 import Stage1Config, load_prior, save_prior, train_stage1
from .stage2 import (
    AlphaSchedule,
    Stage2Config,
    WeightConfig,
    load_adapted,
    load_base,
    save_base,
    train_stage2,
)
from .synthvideo import (
    make_dataset,
    read_dataset,
    read_ppm_frames,
    write_dataset,
    write_ppm_frames,
)

log = logging.getLogger("clearsub")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Defaults.  Flat dicts so that file sections and flags merge trivially.

DENOISER_KEYS = [f.name for f in fields(DenoiserConfig) if f.name not in ("latent_channels", "tap_index")]

DEFAULTS: dict[str, dict] = {
    "synth": {"n": 16, "width": 64, "height": 64, "frames": 8, "start": 0, "export_ppm": False},
    "pretrain": {"data": None, **asdict(PretrainConfig()), **{k: getattr(DenoiserConfig(), k) for k in DENOISER_KEYS}},
    "stage1": {"data": None, **asdict(Stage1Config())},
    "stage2": {
        "data": None,
        "prior": None,
        "base": None,
        **{k: v for k, v in asdict(Stage2Config()).items() if k not in ("alpha", "weights")},
        **asdict(AlphaSchedule()),
        **asdict(WeightConfig()),
    },
    "infer": {"model": None, "base": None, "input": None, **{k: v for k, v in asdict(InferenceConfig()).items() if k != "seed"}, "export_ppm": False},
    "eval": {"pred": None, "gt": None, "pred_field": "auto", "prior": None},
    "gradcheck": {"max_entries": 24},
}

# Desk acceptance run: 64x64x8 clips, 64 train / 16 held-out pairs.
DEMO_DEFAULTS = {
    "n_train": 64,
    "n_test": 16,
    "width": 64,
    "height": 64,
    "frames": 8,
    "pretrain": {"steps": 2500, "lr": 1e-3, "warmup_steps": 100},
    "stage1": {"steps": 1000, "lr": 2e-3, "warmup_steps": 50},
    "stage2": {"steps": 1000, "lr": 1e-4},
    "infer": {"steps": 5},
}
DEFAULTS["demo"] = json.loads(json.dumps(DEMO_DEFAULTS))

# flags that `demo` forwards to its Stage-II section
FLAG_KEYS = {"steps", "lora_rank", "lora_scale", "alpha_min", "alpha_max", "t_period", "gamma", "delta"}


def version_string() -> str:
    """``v<version>`` plus ``-g<hash>[-dirty]`` when run from a git checkout."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--abbrev=7"],
            cwd=here, capture_output=True, text=True, timeout=5, check=True,
        ).stdout.strip()
        return f"v{__version__}-g{out}" if out else f"v{__version__}"
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"


def _add_common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", type=Path, help="JSON config; the section named after the subcommand is used")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=out_required)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clearsub", description="Two-stage video subtitle removal at desk scale.")
    parser.add_argument("--version", action="version", version=f"clearsub {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{synth,pretrain,stage1,stage2,infer,eval,gradcheck,demo}")

    p = sub.add_parser("synth", help="generate a paired synthetic dataset")
    _add_common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--start", type=int, help="index of the first sample")
    p.add_argument("--export-ppm", action="store_true", default=None)

    p = sub.add_parser("pretrain", help="train the frozen base denoiser")
    _add_common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--steps", type=int)
    p.add_argument("--lora-rank", type=int)

    p = sub.add_parser("stage1", help="train the occlusion prior")
    _add_common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("stage2", help="train LoRA + occlusion head on a frozen base")
    _add_common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--prior", type=Path)
    p.add_argument("--base", type=Path)
    p.add_argument("--steps", type=int)
    p.add_argument("--lora-rank", type=int)
    p.add_argument("--lora-scale", type=float)
    p.add_argument("--alpha-min", type=float)
    p.add_argument("--alpha-max", type=float)
    p.add_argument("--t-period", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--delta", type=float)

    p = sub.add_parser("infer", help="remove subtitles (mask-free)")
    _add_common(p)
    p.add_argument("--model", type=Path, help="stage2 output dir or checkpoint dir")
    p.add_argument("--base", type=Path)
    p.add_argument("--input", type=Path, help="dataset dir or directory of PPM frames")
    p.add_argument("--steps", type=int)
    p.add_argument("--lora-scale", type=float)
    p.add_argument("--export-ppm", action="store_true", default=None)
    p.add_argument("--export-debug-masks", action="store_true", default=None)

    p = sub.add_parser("eval", help="PSNR / SSIM / TC report")
    _add_common(p, out_required=False)
    p.add_argument("--pred", type=Path)
    p.add_argument("--gt", type=Path)
    p.add_argument("--pred-field", choices=["auto", "video", "clean", "sub"])
    p.add_argument("--prior", type=Path, help="also report Stage-I prior IoU against gt masks")

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    _add_common(p, out_required=False)
    p.add_argument("--max-entries", type=int)

    p = sub.add_parser("demo", help="synth -> pretrain -> stage1 -> stage2 -> infer -> eval")
    _add_common(p)
    p.add_argument("--steps", type=int, help="Stage-II steps")
    p.add_argument("--lora-rank", type=int)
    p.add_argument("--lora-scale", type=float)
    p.add_argument("--alpha-min", type=float)
    p.add_argument("--alpha-max", type=float)
    p.add_argument("--t-period", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--delta", type=float)
    return parser


def effective_config(command: str, args: argparse.Namespace) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if args.config is not None:
        try:
            section = json.loads(Path(args.config).read_text()).get(command, {})
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        _merge(cfg, section, command)
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "seed", "out", "command", "verbose")}
    if command == "demo":
        _merge(cfg["stage2"], {k: flags.pop(k) for k in list(flags) if k in FLAG_KEYS}, "demo.stage2", strict=False)
    for k, v in flags.items():
        cfg[k] = str(v) if isinstance(v, Path) else v
    return cfg


def _merge(dst: dict, src: dict, where: str, strict: bool = True):
    for k, v in src.items():
        if strict and k not in dst:
            raise UsageError(f"unknown config key {where}.{k}")
        if isinstance(dst.get(k), dict) and isinstance(v, dict):
            _merge(dst[k], v, f"{where}.{k}", strict=False)
        else:
            dst[k] = v


def _pick(cfg: dict, cls):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in cfg.items() if k in names})


def _need(cfg: dict, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")


def write_run_json(out: Path, command: str, cfg: dict, seed: int, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    rec = {"command": command, "config": cfg, "seed": seed, "version": version_string()}
    if extra:
        rec.update(extra)
    (out / "run.json").write_text(json.dumps(rec, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Subcommands.  Each returns the JSON-able result printed on stdout.


def cmd_synth(cfg, seed, out):
    samples = make_dataset(cfg["n"], seed, cfg["width"], cfg["height"], cfg["frames"], start=cfg["start"])
    manifest = write_dataset(samples, out, export_ppm=cfg["export_ppm"])
    return {"dataset": str(out), "count": manifest["count"]}


def _stage2_cfg(cfg) -> Stage2Config:
    s2 = _pick(cfg, Stage2Config)
    s2.alpha = _pick(cfg, AlphaSchedule)
    s2.weights = _pick(cfg, WeightConfig)
    return s2


def _denoiser_cfg(cfg) -> DenoiserConfig:
    return _pick(cfg, DenoiserConfig)


def cmd_pretrain(cfg, seed, out):
    _need(cfg, "data")
    samples = read_dataset(cfg["data"])
    model, hist = pretrain_base([s.clean for s in samples], _pick(cfg, PretrainConfig), _denoiser_cfg(cfg), seed,
                                log_path=out / "pretrain_log.ndjson")
    save_base(model, out / "base")
    return {"base": str(out / "base"), "final_loss": hist[-1]["loss"] if hist else None}


def cmd_stage1(cfg, seed, out):
    _need(cfg, "data")
    samples = read_dataset(cfg["data"])
    model, hist = train_stage1(samples, _pick(cfg, Stage1Config), seed, log_path=out / "stage1_log.ndjson")
    save_prior(model, out / "prior")
    iou = prior_iou(model, samples)
    return {"prior": str(out / "prior"), "final_total": hist[-1]["total"] if hist else None, **iou}


def prior_iou(prior_model, samples) -> dict:
    """Mean IoU of the binarised prior and of a constant-0.5 predictor."""
    ious, const = [], []
    for s in samples:
        m = prior_model.prior(s.sub)
        ious.append(mask_iou(m, s.gt_mask))
        const.append(mask_iou(torch.full_like(m, 0.5), s.gt_mask))
    n = max(len(samples), 1)
    return {"prior_iou": sum(ious) / n, "const_iou": sum(const) / n}


def cmd_stage2(cfg, seed, out):
    _need(cfg, "data", "prior", "base")
    samples = read_dataset(cfg["data"])
    prior = load_prior(cfg["prior"])
    base = load_base(cfg["base"], lora_rank=cfg["lora_rank"])
    model, recs = train_stage2(samples, prior, base, _stage2_cfg(cfg), seed, out_dir=out)
    rep = model.param_report()
    log.info("trainable_fraction %.6f", rep["trainable_fraction"])
    return {"model": str(out / "final"), "param_report": rep, "final_total": recs[-1]["total"] if recs else None}


def _model_dir(path: Path) -> Path:
    path = Path(path)
    return path if (path / "manifest.json").exists() else path / "final"


def _read_inputs(path: Path):
    path = Path(path)
    if (path / "manifest.json").exists():
        return [(s.id, s.sub) for s in read_dataset(path)]
    if any(path.glob("*.ppm")):
        return [(path.name, read_ppm_frames(path))]
    raise FileNotFoundError(f"{path} is neither a dataset nor a PPM frame directory")


def cmd_infer(cfg, seed, out):
    _need(cfg, "model", "base", "input")
    mdir = _model_dir(cfg["model"])
    rank = json.loads((mdir / "manifest.json").read_text())["meta"]["config"]["lora_rank"]
    model = load_adapted(mdir, load_base(cfg["base"], lora_rank=rank))
    icfg = InferenceConfig(steps=cfg["steps"], seed=seed, export_debug_masks=cfg["export_debug_masks"], lora_scale=cfg["lora_scale"])
    entries = []
    for vid, sub in _read_inputs(cfg["input"]):
        vdir = out / vid
        if icfg.export_debug_masks:
            video, _ = export_debug_masks(sub, model, icfg, vdir / "debug_masks")
        else:
            video = remove_subtitles(sub, model, icfg)
        vdir.mkdir(parents=True, exist_ok=True)
        save_tensor(vdir / "video.clrt", video)
        if cfg["export_ppm"]:
            write_ppm_frames(video, vdir / "ppm")
        entries.append({"id": vid, "file": f"{vid}/video.clrt", "shape": list(video.shape)})
    manifest = {"schema": 1, "kind": "predictions", "count": len(entries), "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return {"predictions": str(out), "count": len(entries)}


def read_video_set(path: Path, field: str = "auto") -> dict[str, torch.Tensor]:
    """``{id: video}`` from a predictions dir or a dataset dir."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    out = {}
    for e in manifest["samples"]:
        if manifest.get("kind") == "predictions":
            if field not in ("auto", "video"):
                raise UsageError(f"{path} holds predictions; field {field!r} does not exist")
            out[e["id"]] = load_tensor(path / e["file"])
        else:
            key = "clean" if field in ("auto", "video") else field
            out[e["id"]] = load_tensor(path / e["files"][key])
    return out


def cmd_eval(cfg, seed, out):
    _need(cfg, "pred", "gt")
    preds = read_video_set(cfg["pred"], cfg["pred_field"])
    gts = read_video_set(cfg["gt"], "clean")
    if set(preds) != set(gts):
        raise ValueError(f"prediction ids do not match reference ids ({len(preds)} vs {len(gts)})")
    ids = sorted(gts)
    pm = gm = None
    if cfg.get("prior"):
        prior = load_prior(cfg["prior"])
        samples = {s.id: s for s in read_dataset(cfg["gt"])}
        pm = [prior.prior(samples[i].sub) for i in ids]
        gm = [samples[i].gt_mask for i in ids]
    report = eval_report([preds[i] for i in ids], [gts[i] for i in ids], ids=ids, pred_masks=pm, gt_masks=gm)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(dumps_report(report))
    return report


def cmd_gradcheck(cfg, seed, out):
    from .gradsuite import run_suite

    res = run_suite(seed=seed, max_entries=cfg["max_entries"])
    if not res["passed"]:
        bad = [k for k, v in res.items() if isinstance(v, dict) and not v["passed"]]
        raise GradCheckFailed(res, bad)
    return res


class GradCheckFailed(RuntimeError):
    def __init__(self, result, bad):
        super().__init__(f"gradient check failed for: {', '.join(bad)}")
        self.result = result


def cmd_demo(cfg, seed, out):
    t0 = time.perf_counter()
    timings = {}
    W, H, F = cfg["width"], cfg["height"], cfg["frames"]
    train = make_dataset(cfg["n_train"], seed, W, H, F)
    test = make_dataset(cfg["n_test"], seed, W, H, F, start=cfg["n_train"])
    write_dataset(train, out / "data" / "train")
    write_dataset(test, out / "data" / "test")
    timings["synth"] = time.perf_counter() - t0

    t = time.perf_counter()
    pcfg = {**DEFAULTS["pretrain"], **cfg["pretrain"]}
    s2 = {**DEFAULTS["stage2"], **cfg["stage2"]}
    pcfg["lora_rank"] = s2["lora_rank"]
    base, _ = pretrain_base([s.clean for s in train], _pick(pcfg, PretrainConfig), _denoiser_cfg(pcfg), seed,
                            log_path=out / "pretrain_log.ndjson")
    save_base(base, out / "base")
    timings["pretrain"] = time.perf_counter() - t

    t = time.perf_counter()
    s1 = {**DEFAULTS["stage1"], **cfg["stage1"]}
    prior, _ = train_stage1(train, _pick(s1, Stage1Config), seed, log_path=out / "stage1_log.ndjson")
    save_prior(prior, out / "prior")
    iou = prior_iou(prior, test)
    timings["stage1"] = time.perf_counter() - t

    t = time.perf_counter()
    model, _ = train_stage2(train, prior, base, _stage2_cfg(s2), seed, out_dir=out / "stage2")
    timings["stage2"] = time.perf_counter() - t

    t = time.perf_counter()
    icfg = InferenceConfig(steps=cfg["infer"]["steps"], seed=seed)
    preds = [remove_subtitles(s.sub, model, icfg) for s in test]
    timings["infer"] = time.perf_counter() - t

    ids = [s.id for s in test]
    rep_out = eval_report(preds, [s.clean for s in test], ids=ids,
                          pred_masks=[prior.prior(s.sub) for s in test], gt_masks=[s.gt_mask for s in test])
    rep_in = eval_report([s.sub for s in test], [s.clean for s in test], ids=ids)
    (out / "report.json").write_text(dumps_report(rep_out))
    (out / "report_input.json").write_text(dumps_report(rep_in))
    timings["total"] = time.perf_counter() - t0
    psnr_in, psnr_out = rep_in["aggregate"]["psnr_db"], rep_out["aggregate"]["psnr_db"]
    summary = {
        "psnr_in": psnr_in,
        "psnr_out": psnr_out,
        "psnr_gain": psnr_out - psnr_in,
        "ssim_in": rep_in["aggregate"]["ssim"],
        "ssim_out": rep_out["aggregate"]["ssim"],
        **iou,
        "iou_margin": iou["prior_iou"] - iou["const_iou"],
        "trainable_fraction": model.trainable_fraction,
        "seconds": timings,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "stage1": cmd_stage1,
    "stage2": cmd_stage2,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "demo": cmd_demo,
}


def _setup_threads():
    n = os.environ.get("CLEAR_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError as exc:
            raise UsageError(f"CLEAR_THREADS must be an integer, got {n!r}") from exc


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        _setup_threads()
        cfg = effective_config(args.command, args)
        out = args.out
        if out is not None:
            write_run_json(out, args.command, cfg, args.seed)
        result = COMMANDS[args.command](cfg, args.seed, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"clearsub: error: {exc}", file=sys.stderr)
        return 2
    except GradCheckFailed as exc:
        print(json.dumps(exc.result, indent=2))
        log.error("%s", exc)
        return 1
    except Exception as exc:  # runtime failure: report, exit 1
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return 1
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
