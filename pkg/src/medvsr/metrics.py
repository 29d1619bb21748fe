"""PSNR, SSIM, the Charbonnier loss and forward-backward flow consistency."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .blocks import bilinear_sample, pixel_grid
from .data import FlowEstimator, estimate_flow
from .errors import ContractError, DomainError

PSNR_CAP = 99.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for peak 1; identical inputs give ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2D image with 1D taps ``g``."""
    n = len(g)
    rows = sum(g[i] * img[i:img.shape[0] - n + 1 + i] for i in range(n))
    return sum(g[i] * rows[:, i:img.shape[1] - n + 1 + i] for i in range(n))


def ssim(a, b, win: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM, Gaussian window, per channel then averaged."""
    a, b = _pair(a, b)
    if a.shape[0] < win or a.shape[1] < win:
        raise ContractError(f"frame {a.shape[:2]} smaller than the {win}x{win} window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    C1, C2 = 0.01 ** 2, 0.03 ** 2
    g = gaussian_window(win, sigma)
    scores = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        m = ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx ** 2 + my ** 2 + C1) * (sxx + syy + C2))
        scores.append(m.mean())
    return float(np.mean(scores))


def charbonnier(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-3,
                reduction: str = "mean") -> torch.Tensor:
    """Smooth L1 surrogate.

    ``mean``: average of ``sqrt(d^2 + eps^2)`` over elements.  ``norm``:
    ``sqrt(||d||^2 + eps^2)`` over the whole tensor.
    """
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    d2 = (pred - gt) ** 2
    if reduction == "mean":
        # eps + mean(sqrt(d^2 + eps^2) - eps), rearranged to avoid cancellation
        return eps + (d2 / (torch.sqrt(d2 + eps * eps) + eps)).mean()
    if reduction == "norm":
        return torch.sqrt(d2.sum() + eps * eps)
    raise ContractError(f"unknown reduction {reduction!r}")


def consistency_residual(o_f: np.ndarray, o_b: np.ndarray) -> np.ndarray:
    """``|o_f(p) + o_b(p + o_f(p))|`` per pixel; ``o_b`` sampled bilinearly, zero outside."""
    H, W = o_f.shape[:2]
    of = torch.as_tensor(o_f, dtype=torch.float64)
    ob = torch.as_tensor(o_b, dtype=torch.float64).permute(2, 0, 1)[None]
    coords = (pixel_grid(H, W, torch.float64) + of)[None]
    back = bilinear_sample(ob, coords)[0].permute(1, 2, 0)
    return torch.linalg.vector_norm(of + back, dim=-1).numpy()


def flow_consistency_error(clip: np.ndarray, est: FlowEstimator = FlowEstimator()) -> float:
    """Mean forward-backward residual over pixels and adjacent pairs (pixels)."""
    if len(clip) < 2:
        raise ContractError("flow consistency needs at least two frames")
    errs = []
    for t in range(len(clip) - 1):
        o_f = estimate_flow(clip[t], clip[t + 1], est)
        o_b = estimate_flow(clip[t + 1], clip[t], est)
        errs.append(consistency_residual(o_f, o_b).mean())
    return float(np.mean(errs))


@dataclass
class MetricReport:
    clip: str
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    flow_error: float | None = None

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def to_json(self) -> str:
        d = asdict(self)
        d["mean_psnr"], d["mean_ssim"] = self.mean_psnr, self.mean_ssim
        return json.dumps(d)


def evaluate_clip(name: str, sr: np.ndarray, gt: np.ndarray) -> MetricReport:
    if len(sr) != len(gt):
        raise ContractError(f"{name}: {len(sr)} SR frames vs {len(gt)} GT frames")
    return MetricReport(name, [psnr(s, g) for s, g in zip(sr, gt)],
                        [ssim(s, g) for s, g in zip(sr, gt)])


def aggregate(reports: list[MetricReport]) -> tuple[float, float]:
    """Mean over frames within each clip, then over clips."""
    return (float(np.mean([r.mean_psnr for r in reports])),
            float(np.mean([r.mean_ssim for r in reports])))


def write_reports(reports: list[MetricReport], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out_dir / "metrics.jsonl", out_dir / "metrics.csv"
    jpath.write_text("".join(r.to_json() + "\n" for r in reports))
    with open(cpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip", "frame", "psnr", "ssim"])
        for r in reports:
            for i, (p, s) in enumerate(zip(r.psnr, r.ssim)):
                w.writerow([r.clip, i + 1, repr(p), repr(s)])
    return jpath, cpath
