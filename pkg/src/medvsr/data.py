"""Clip I/O, degradation, patch sampling, synthetic clips and flow estimation.

A clip is a float64 array ``(T, H, W, 3)`` with values in ``[0, 1]``.
Flow fields are ``(H, W, 2)`` arrays of ``(dx, dy)`` pixel displacements
such that ``a(p) ~ b(p + flow(p))`` for ``estimate_flow(a, b)``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, GapError
from .resize import bicubic_down

FRAME_PATTERN = "frame_{:05d}.png"
_FRAME_RE = re.compile(r"^frame_(\d{5})\.png$")


@dataclass(frozen=True)
class DegradationSpec:
    scale: int = 4
    noise_std: float = 15.0  # on the 0-255 scale
    seed: int = 0

    def __post_init__(self):
        if self.scale != 4:
            raise ContractError(f"only x4 degradation is supported, got {self.scale}")
        if self.noise_std < 0:
            raise ContractError("noise_std must be non-negative")


@dataclass(frozen=True)
class FlowEstimator:
    method: str = "block_match"
    block: int = 8
    radius: int = 4

    def __post_init__(self):
        if self.method not in ("zero", "block_match"):
            raise ContractError(f"unknown flow method {self.method!r}")
        if self.block < 1 or self.radius < 0:
            raise ContractError("block must be >= 1 and radius >= 0")


# -- degradation ---------------------------------------------------------------

def crop_divisible(clip: np.ndarray, scale: int) -> np.ndarray:
    """Center-crop so both spatial sizes divide by ``scale``."""
    H, W = clip.shape[1:3]
    h, w = H - H % scale, W - W % scale
    top, left = (H - h) // 2, (W - w) // 2
    return clip[:, top:top + h, left:left + w]


def degrade(hr: np.ndarray, spec: DegradationSpec = DegradationSpec()) -> np.ndarray:
    """Bicubic x4 downsampling, additive Gaussian noise, clamp to ``[0, 1]``."""
    hr = crop_divisible(np.asarray(hr, dtype=np.float64), spec.scale)
    rng = np.random.default_rng(spec.seed)
    frames = []
    for frame in hr:
        lr = bicubic_down(frame, spec.scale)
        if spec.noise_std > 0:
            lr = lr + rng.normal(0.0, spec.noise_std / 255.0, size=lr.shape)
        frames.append(np.clip(lr, 0.0, 1.0))
    return np.stack(frames)


# -- clip files ----------------------------------------------------------------

def load_clip(directory) -> np.ndarray:
    directory = Path(directory)
    indices = {}
    for p in directory.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            indices[int(m.group(1))] = p
    if not indices:
        raise ContractError(f"no frame_*.png files in {directory}")
    for i in range(1, max(indices) + 1):
        if i not in indices:
            raise GapError(i)
    frames = []
    for i in sorted(indices):
        img = np.asarray(Image.open(indices[i]).convert("RGB"), dtype=np.float64) / 255.0
        if frames and img.shape != frames[0].shape:
            raise ContractError(
                f"frame {i} has shape {img.shape}, expected {frames[0].shape}")
        frames.append(img)
    return np.stack(frames)


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_clip(clip: np.ndarray, directory, names: list[str] | None = None) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(clip):
        name = names[i] if names else FRAME_PATTERN.format(i + 1)
        path = directory / name
        Image.fromarray(to_uint8(frame)).save(path)
        paths.append(path)
    return paths


# -- patches -------------------------------------------------------------------

def sample_patch(hr: np.ndarray, lr: np.ndarray, size: int, T: int, rng, scale: int = 4):
    """Random aligned ``(HR, LR)`` crops of ``T`` frames and HR side ``size``.

    ``rng`` is a seed or :class:`numpy.random.Generator`.  The LR offset is
    drawn first and the HR offset is exactly ``scale`` times it.
    """
    rng = np.random.default_rng(rng)
    if size % scale:
        raise ContractError(f"patch size {size} not divisible by {scale}")
    n, H, W = lr.shape[:3]
    if hr.shape[0] != n or hr.shape[1] != H * scale or hr.shape[2] != W * scale:
        raise ContractError(f"HR {hr.shape} and LR {lr.shape} are not a x{scale} pair")
    ls = size // scale
    if n < T or H < ls or W < ls:
        raise ContractError(f"clip {lr.shape[:3]} too small for T={T}, LR patch {ls}")
    t0 = int(rng.integers(0, n - T + 1))
    y0 = int(rng.integers(0, H - ls + 1))
    x0 = int(rng.integers(0, W - ls + 1))
    lr_patch = lr[t0:t0 + T, y0:y0 + ls, x0:x0 + ls]
    hr_patch = hr[t0:t0 + T, y0 * scale:(y0 + ls) * scale, x0 * scale:(x0 + ls) * scale]
    return hr_patch, lr_patch


# -- synthetic clips -----------------------------------------------------------

SYNTH_KINDS = ("moving_bars", "drifting_texture", "jitter")


def _texture(rng, n_waves: int = 6, max_freq: float = 0.02):
    freqs = rng.uniform(-max_freq, max_freq, size=(n_waves, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(n_waves, 3))
    amps = rng.uniform(0.04, 0.1, size=(n_waves, 3))
    base = rng.uniform(0.35, 0.65, size=3)

    def render(xs, ys):
        out = np.broadcast_to(base, xs.shape + (3,)).copy()
        for (u, v), ph, a in zip(freqs, phases, amps):
            arg = 2 * np.pi * (u * xs + v * ys)
            out += a * np.cos(arg[..., None] + ph)
        return out
    return render


def _bars(rng, period: float | None = None, sharpness: float = 1.5):
    # wide enough that the bars stay well resolved after x4 downsampling
    period = period or rng.uniform(48, 80)
    angle = rng.uniform(0, np.pi)
    lo, hi = rng.uniform(0.15, 0.35, 3), rng.uniform(0.65, 0.85, 3)

    def render(xs, ys):
        s = np.cos(angle) * xs + np.sin(angle) * ys
        w = 0.5 + 0.5 * np.tanh(sharpness * np.sin(2 * np.pi * s / period))
        return lo + (hi - lo) * w[..., None]
    return render


def jitter_offsets(T: int, seed: int, max_shift: float = 6.0) -> np.ndarray:
    """Per-frame global ``(dx, dy)`` offsets, i.i.d. uniform on ``[-max_shift, max_shift]``."""
    rng = np.random.default_rng([seed, 1])
    return rng.uniform(-max_shift, max_shift, size=(T, 2))


def synth_clip(kind: str, T: int, H: int, W: int, seed: int = 0,
               velocity: tuple[float, float] | None = None,
               max_shift: float = 6.0) -> np.ndarray:
    """Procedural clip with analytic (exactly sub-pixel) motion.

    ``moving_bars`` and ``drifting_texture`` translate by ``velocity`` pixels
    per frame (random when ``None``).  ``jitter`` adds a slow drift plus an
    independent random global offset in every frame.
    """
    if kind not in SYNTH_KINDS:
        raise ContractError(f"unknown synthetic kind {kind!r}")
    rng = np.random.default_rng(seed)
    if velocity is None:
        speed, ang = rng.uniform(0.3, 1.5), rng.uniform(0, 2 * np.pi)
        velocity = (speed * np.cos(ang), speed * np.sin(ang))
    render = _bars(rng) if kind == "moving_bars" else _texture(rng)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    shifts = np.outer(np.arange(T), velocity)
    if kind == "jitter":
        shifts = shifts + jitter_offsets(T, seed, max_shift)
    frames = [render(xs - sx, ys - sy) for sx, sy in shifts]
    return np.clip(np.stack(frames), 0.0, 1.0)


# -- flow ------------------------------------------------------------------------

def _candidates(radius: int) -> np.ndarray:
    """Displacements ordered by magnitude, then ``(dy, dx)`` lexicographically."""
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    cand = np.stack([dy.ravel(), dx.ravel()], axis=1)
    order = np.lexsort((cand[:, 1], cand[:, 0], (cand ** 2).sum(1)))
    return cand[order]


def estimate_flow(a: np.ndarray, b: np.ndarray, est: FlowEstimator = FlowEstimator()) -> np.ndarray:
    """Per-pixel ``(dx, dy)`` with ``a(p) ~ b(p + flow(p))``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"frame shapes differ: {a.shape} vs {b.shape}")
    H, W = a.shape[:2]
    if est.method == "zero":
        return np.zeros((H, W, 2))
    r, bs = est.radius, est.block
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    bp = np.pad(b, ((r, r), (r, r), (0, 0)), mode="edge")
    rows, cols = np.arange(0, H, bs), np.arange(0, W, bs)
    cand = _candidates(r)
    costs = np.empty((len(cand), len(rows), len(cols)))
    for k, (dy, dx) in enumerate(cand):
        shifted = bp[r + dy:r + dy + H, r + dx:r + dx + W]
        sad = np.abs(a - shifted).sum(axis=2)
        costs[k] = np.add.reduceat(np.add.reduceat(sad, rows, axis=0), cols, axis=1)
    best = cand[np.argmin(costs, axis=0)]  # (nby, nbx, 2) as (dy, dx)
    per_pixel = np.repeat(np.repeat(best, bs, axis=0), bs, axis=1)[:H, :W]
    return per_pixel[..., ::-1].astype(np.float64).copy()


def clip_flows(clip: np.ndarray, est: FlowEstimator) -> tuple[np.ndarray, np.ndarray]:
    """Flows to the previous and to the next frame, each ``(T, H, W, 2)``.

    ``to_prev[t]`` maps frame ``t`` into frame ``t-1``; ``to_next[t]`` into
    ``t+1``.  Entries without a neighbour are zero.
    """
    T, H, W = clip.shape[:3]
    to_prev = np.zeros((T, H, W, 2))
    to_next = np.zeros((T, H, W, 2))
    if est.method == "zero":
        return to_prev, to_next
    for t in range(1, T):
        to_prev[t] = estimate_flow(clip[t], clip[t - 1], est)
        to_next[t - 1] = estimate_flow(clip[t - 1], clip[t], est)
    return to_prev, to_next
