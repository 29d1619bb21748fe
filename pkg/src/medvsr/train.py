"""Training: cosine schedule, one optimisation step, and a resumable loop."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .data import sample_patch
from .errors import ContractError, NumericError
from .metrics import charbonnier
from .model import MedVSR, clip_to_tensor, flows_for


@dataclass
class Schedule:
    iterations: int = 2000
    lr: float = 2e-4
    min_lr: float = 1e-7
    batch: int = 2
    patch: int = 64
    frames: int = 7
    eps: float = 1e-3
    beta2: float = 0.999

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(it: int, total: int, lr_max: float = 2e-4, lr_min: float = 1e-7) -> float:
    """``lr_max`` at ``it = 0`` decaying to ``lr_min`` at ``it = total``."""
    if total <= 0:
        return lr_max
    frac = min(max(it / total, 0.0), 1.0)
    return lr_min + (lr_max - lr_min) * 0.5 * (1.0 + math.cos(math.pi * frac))


def make_optimizer(model: MedVSR, lr: float = 2e-4, beta2: float = 0.999) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, beta2))


def clip_loss(sr: torch.Tensor, hr: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Charbonnier per frame (mean over batch and pixels), summed over frames."""
    return sum(charbonnier(sr[:, t], hr[:, t], eps) for t in range(sr.shape[1]))


def train_step(model: MedVSR, optimizer: torch.optim.Optimizer, lr_batch: torch.Tensor,
               hr_batch: torch.Tensor, flows=(None, None), lr: float | None = None,
               eps: float = 1e-3) -> float:
    """One gradient step; returns the loss before the update.

    Raises :class:`NumericError` (without touching the weights) when the loss
    or any gradient is not finite.
    """
    model.train()
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    sr = model(lr_batch, *flows)
    loss = clip_loss(sr, hr_batch, eps)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}", {"loss": value, "lr": lr})
    loss.backward()
    bad = [n for n, p in model.named_parameters()
           if p.grad is not None and not torch.isfinite(p.grad).all()]
    if bad:
        raise NumericError("non-finite gradients", {"loss": value, "lr": lr, "params": bad})
    optimizer.step()
    return value


class Trainer:
    """Samples random patch batches from paired clips and steps the model.

    Everything that influences the loss trajectory (weights, optimiser
    moments, iteration, sampling RNG) is exposed for checkpointing.
    """

    def __init__(self, model: MedVSR, hr_clips: list[np.ndarray], lr_clips: list[np.ndarray],
                 schedule: Schedule = Schedule(), seed: int = 0):
        if len(hr_clips) != len(lr_clips) or not hr_clips:
            raise ContractError("need the same positive number of HR and LR clips")
        self.model, self.schedule = model, schedule
        self.hr_clips, self.lr_clips = hr_clips, lr_clips
        self.optimizer = make_optimizer(model, schedule.lr, schedule.beta2)
        self.rng = np.random.default_rng(seed)
        self.iteration = 0

    def sample_batch(self):
        s = self.schedule
        hrs, lrs = [], []
        for _ in range(s.batch):
            i = int(self.rng.integers(len(self.hr_clips)))
            hr, lr = sample_patch(self.hr_clips[i], self.lr_clips[i], s.patch, s.frames, self.rng)
            hrs.append(hr)
            lrs.append(lr)
        hrs, lrs = np.stack(hrs), np.stack(lrs)
        flows = flows_for(lrs, self.model.config.flow_estimator)
        return clip_to_tensor(lrs), clip_to_tensor(hrs), flows

    def current_lr(self) -> float:
        s = self.schedule
        return cosine_lr(self.iteration, max(s.iterations - 1, 1), s.lr, s.min_lr)

    def step(self) -> tuple[float, float]:
        lr_batch, hr_batch, flows = self.sample_batch()
        lr = self.current_lr()
        try:
            loss = train_step(self.model, self.optimizer, lr_batch, hr_batch, flows, lr,
                              self.schedule.eps)
        except NumericError as err:
            err.diagnostics["iteration"] = self.iteration + 1
            raise
        self.iteration += 1
        return loss, lr

    def run(self, until: int | None = None, on_step=None) -> list[tuple[int, float, float]]:
        """Step until ``until`` iterations are done; returns ``(iteration, loss, lr)`` rows."""
        until = self.schedule.iterations if until is None else until
        rows = []
        while self.iteration < until:
            loss, lr = self.step()
            rows.append((self.iteration, loss, lr))
            if on_step is not None:
                on_step(self, loss, lr)
        return rows
