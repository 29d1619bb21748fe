"""Train a deliberately small network for a few hundred steps and compare with bicubic.

This is a toy: a narrow model, small patches, two synthetic clips.  It takes
about four minutes on one CPU core.  The loss sits on a plateau for the first
couple of hundred steps before it starts to fall.

Run: python demos/03_tiny_training.py
"""
import numpy as np
import torch

from medvsr.cli import synthetic_set
from medvsr.config import RunConfig
from medvsr.metrics import psnr
from medvsr.model import MedVSR, forward_clip, param_count
from medvsr.resize import resize_np
from medvsr.train import Trainer

torch.manual_seed(0)
cfg = RunConfig(width=16, d_state=8, heads=2, depth=1, dcn_groups=2, window=8,
                iterations=800, batch=2, frames=3, patch=64,
                synth_clips=2, synth_size=128, synth_frames=5)

hr, lr = synthetic_set(cfg, cfg.synth_clips, seed=0)
model = MedVSR(cfg.model_config())
print("parameters:", param_count(model))

trainer = Trainer(model, hr, lr, cfg.schedule(), seed=0)
losses = []


def log(t, loss, lr_):
    losses.append(loss)
    if t.iteration % 100 == 0:
        print(f"  it {t.iteration:4d}  loss {np.mean(losses[-50:]):.4f}  lr {lr_:.2e}")


trainer.run(on_step=log)

val_hr, val_lr = synthetic_set(cfg, 1, seed=99)
sr = forward_clip(model, val_lr[0])
bic = np.clip(np.stack([resize_np(f, *val_hr[0].shape[1:3]) for f in val_lr[0]]), 0, 1)
print("held-out PSNR  model %.2f dB  bicubic %.2f dB" % (
    np.mean([psnr(s, h) for s, h in zip(sr, val_hr[0])]),
    np.mean([psnr(b, h) for b, h in zip(bic, val_hr[0])])))
