"""Command-line entry points.

Exit codes: 0 success, 2 usage or contract violation, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import RunConfig
from .data import SYNTH_KINDS, degrade, load_clip, save_clip, synth_clip, _FRAME_RE
from .errors import ContractError, MedVSRError, NumericError
from .metrics import (MetricReport, aggregate, evaluate_clip, flow_consistency_error,
                      write_reports)
from .model import MedVSR, forward_clip, param_count
from .train import Trainer

RESOLVED = "config.resolved"
LOSS_LOG = "loss.csv"

ABLATION_AXES = {
    "cssb": {"full": [], "no_lpe": ["lpe=false"], "no_lw": ["cssb_lw=false"],
             "no_sp": ["sp=false"]},
    "issb": {"full": [], "no_lw": ["issb_lw=false"], "no_cat": ["cat=false"]},
    "lksb": {**{f"k{k}": ["recon_block=lksb", f"k={k}"] for k in (3, 5, 7, 9)},
             **{b: [f"recon_block={b}"] for b in ("resblock", "dwblock", "pblock")}},
    "prop": {s: [f"prop_scheme={s}"] for s in ("t2t", "t1t", "t2t1", "both")},
    "window": {f"l{w}": [f"window={w}"] for w in (4, 8, 16, 32)},
}


# -- data helpers ----------------------------------------------------------------

def clip_seed(seed: int, index: int) -> int:
    """Independent per-clip seed derived from the run seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def find_clips(root) -> list[tuple[str, Path]]:
    """``(name, dir)`` pairs: ``root`` itself if it holds frames, else its clip subdirs."""
    root = Path(root)
    if not root.is_dir():
        raise ContractError(f"{root} is not a directory")
    if any(_FRAME_RE.match(p.name) for p in root.iterdir()):
        return [(root.name, root)]
    clips = [(p.name, p) for p in sorted(root.iterdir())
             if p.is_dir() and any(_FRAME_RE.match(q.name) for q in p.iterdir())]
    if not clips:
        raise ContractError(f"no clips found under {root}")
    return clips


def frame_names(directory) -> list[str]:
    return sorted(p.name for p in Path(directory).iterdir() if _FRAME_RE.match(p.name))


def synthetic_set(cfg: RunConfig, n: int, seed: int):
    """``n`` paired (HR, LR) synthetic clips alternating bars and texture."""
    kinds = [k for k in SYNTH_KINDS if k != "jitter"]
    hr, lr = [], []
    for i in range(n):
        s = clip_seed(seed, i)
        clip = synth_clip(kinds[i % len(kinds)], cfg.synth_frames, cfg.synth_size,
                          cfg.synth_size, seed=s)
        hr.append(clip)
        lr.append(degrade(clip, cfg.degradation(s)))
    return hr, lr


def paired_set(hr_root, lr_root):
    hr, lr = [], []
    lr_dirs = dict(find_clips(lr_root))
    for name, d in find_clips(hr_root):
        if name not in lr_dirs:
            raise ContractError(f"clip {name!r} missing from LR tree {lr_root}")
        hr.append(load_clip(d))
        lr.append(load_clip(lr_dirs[name]))
    return hr, lr


def training_set(cfg: RunConfig):
    if cfg.hr_root:
        return paired_set(cfg.hr_root, cfg.lr_root)
    return synthetic_set(cfg, cfg.synth_clips, cfg.seed)


def validation_set(cfg: RunConfig):
    if cfg.val_hr_root:
        return paired_set(cfg.val_hr_root, cfg.val_lr_root)
    # disjoint seeds from the training set
    return synthetic_set(cfg, 2, cfg.seed + 10_000)


# -- config plumbing -------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    pairs = list(args.override or [])
    if args.seed is not None:
        pairs.append(f"seed={args.seed}")
    if args.out is not None:
        pairs.append(f"out_dir={args.out}")
    return cfg.with_overrides(pairs)


# -- training --------------------------------------------------------------------

def _read_loss_rows(path: Path, upto: int) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [r for r in rows if int(r[0]) <= upto]


def train_run(cfg: RunConfig, out: Path, resume=None, data=None) -> MedVSR:
    """Train per ``cfg`` into ``out``; returns the trained model."""
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / RESOLVED)
    torch.manual_seed(cfg.seed)
    model = MedVSR(cfg.model_config())
    hr, lr = data if data is not None else training_set(cfg)
    trainer = Trainer(model, hr, lr, cfg.schedule(), seed=cfg.seed)
    rows = []
    if resume is not None:
        ck = ckpt_io.load_checkpoint(resume)
        if ck.config != model.config:
            raise ContractError(f"checkpoint {resume} was written for a different model config")
        model.load_state_dict(ck.weights)
        ckpt_io.restore_optimizer(model, trainer.optimizer, ck)
        trainer.rng = ckpt_io.restore_rng(ck) or trainer.rng
        trainer.iteration = ck.iteration
        rows = _read_loss_rows(out / LOSS_LOG, ck.iteration)

    log = open(out / LOSS_LOG, "w", newline="")
    writer = csv.writer(log)
    writer.writerow(["iteration", "loss", "lr"])
    writer.writerows(rows)
    total = cfg.iterations
    # out_dir is left out so the same run in two places gives identical bytes
    run_echo = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}

    def on_step(t: Trainer, loss: float, lr_: float):
        writer.writerow([t.iteration, repr(loss), repr(lr_)])
        log.flush()
        if t.iteration % cfg.checkpoint_every == 0 or t.iteration == total:
            ckpt_io.save_checkpoint(out / "checkpoints" / f"ckpt_{t.iteration:06d}.mvsr",
                                    model, t.optimizer, t.iteration, t.rng, run_echo)

    try:
        trainer.run(total, on_step)
    except NumericError as err:
        (out / "diagnostic.json").write_text(json.dumps(
            {"error": str(err), **err.diagnostics}, indent=2, default=str))
        raise
    finally:
        log.close()
    return model


def evaluate_model(model: MedVSR, hr_clips, lr_clips, names=None) -> list[MetricReport]:
    names = names or [f"clip_{i:03d}" for i in range(len(hr_clips))]
    return [evaluate_clip(n, forward_clip(model, l), h)
            for n, h, l in zip(names, hr_clips, lr_clips)]


# -- commands --------------------------------------------------------------------

def cmd_degrade(args) -> int:
    cfg = resolve_config(args)
    if not cfg.hr_root:
        raise ContractError("degrade needs hr_root (set it in --config or --override)")
    clips = find_clips(cfg.hr_root)
    out = Path(args.out) if args.out else Path(cfg.lr_root or cfg.out_dir)
    single = len(clips) == 1 and clips[0][1] == Path(cfg.hr_root)
    entries = []
    for i, (name, d) in enumerate(clips):
        seed = clip_seed(cfg.seed, i)
        lr = degrade(load_clip(d), cfg.degradation(seed))
        save_clip(lr, out if single else out / name, frame_names(d))
        entries.append({"clip": name, "seed": seed, "frames": len(lr)})
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(
        {"scale": cfg.scale, "noise_std": cfg.noise_std, "seed": cfg.seed, "clips": entries},
        indent=2))
    cfg.write(out / RESOLVED)
    print(f"degraded {len(entries)} clip(s) into {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out_dir)
    train_run(cfg, out, resume=args.resume)
    print(f"trained {cfg.iterations} iterations; outputs in {out}")
    return 0


def cmd_infer(args) -> int:
    ck = ckpt_io.load_checkpoint(args.checkpoint)
    if args.config or args.override:
        wanted = resolve_config(args).model_config()
        if wanted != ck.config:
            raise ContractError("model config does not match the checkpoint")
    model = ck.build_model()
    out = Path(args.out or "sr")
    clips = find_clips(args.input)
    single = len(clips) == 1 and clips[0][1] == Path(args.input)
    for name, d in clips:
        save_clip(forward_clip(model, load_clip(d)), out if single else out / name,
                  frame_names(d))
    print(f"wrote SR frames for {len(clips)} clip(s) to {out}")
    return 0


def cmd_eval(args) -> int:
    sr = dict(find_clips(args.sr))
    gt = find_clips(args.gt)
    if len(sr) == 1 and len(gt) == 1:
        sr = {gt[0][0]: next(iter(sr.values()))}
    reports = []
    for name, d in gt:
        if name not in sr:
            raise ContractError(f"clip {name!r} has no SR counterpart")
        reports.append(evaluate_clip(name, load_clip(sr[name]), load_clip(d)))
    out = Path(args.out or "eval")
    write_reports(reports, out)
    mp, ms = aggregate(reports)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip", "psnr", "ssim"])
        for r in reports:
            w.writerow([r.clip, repr(r.mean_psnr), repr(r.mean_ssim)])
        w.writerow(["mean", repr(mp), repr(ms)])
    print(f"psnr {mp:.4f} ssim {ms:.6f}")
    return 0


def cmd_flow_error(args) -> int:
    cfg = resolve_config(args)
    est = cfg.model_config().flow_estimator
    if args.method:
        from .data import FlowEstimator
        est = FlowEstimator(args.method, est.block, est.radius)
    results = {name: flow_consistency_error(load_clip(d), est)
               for name, d in find_clips(args.input)}
    mean = float(np.mean(list(results.values())))
    report = {"method": est.method, "clips": results, "mean": mean}
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "flow_error.json").write_text(json.dumps(report, indent=2))
    print(f"flow consistency error ({est.method}): {mean:.6f}")
    return 0


def cmd_ablate(args) -> int:
    if args.axis not in ABLATION_AXES:
        raise ContractError(f"unknown axis {args.axis!r}; choose from {sorted(ABLATION_AXES)}")
    base = resolve_config(args)
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = training_set(base)
    val_hr, val_lr = validation_set(base)
    rows = []
    for variant, overrides in ABLATION_AXES[args.axis].items():
        cfg = base.with_overrides(overrides + [f"out_dir={out / variant}"])
        model = train_run(cfg, out / variant, data=data)
        mp, ms = aggregate(evaluate_model(model, val_hr, val_lr))
        rows.append([variant, param_count(model), repr(mp), repr(ms)])
        print(f"{variant}: params {param_count(model)} psnr {mp:.4f} ssim {ms:.6f}", flush=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "params", "psnr", "ssim"])
        w.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="medvsr", description="Video super-resolution toolkit.")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--override", action="append", metavar="KEY=VALUE")
        sp.set_defaults(fn=fn)
        return sp

    verb("degrade", cmd_degrade, "build an LR tree from an HR tree")
    verb("train", cmd_train, "train a model").add_argument("--resume", help="checkpoint to resume")
    sp = verb("infer", cmd_infer, "super-resolve clips with a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True, help="clip dir or tree of clip dirs")
    sp = verb("eval", cmd_eval, "PSNR/SSIM of SR clips against ground truth")
    sp.add_argument("--sr", required=True)
    sp.add_argument("--gt", required=True)
    sp = verb("flow-error", cmd_flow_error, "forward-backward flow consistency")
    sp.add_argument("--input", required=True)
    sp.add_argument("--method", choices=["zero", "block_match"])
    verb("ablate", cmd_ablate, "train and score one ablation axis").add_argument(
        "--axis", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    except (MedVSRError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
