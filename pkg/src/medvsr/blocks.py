"""Differentiable building blocks shared by propagation and reconstruction.

Feature maps are ``(B, C, H, W)``.  Token sequences are ``(..., L, C)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, NumericError


# -- local windows -----------------------------------------------------------

@dataclass
class WindowGrid:
    """Row-major ``lh x lw`` tiles of a (possibly padded) feature map.

    ``tokens`` has shape ``(B, nh * nw, lh * lw, C)``.
    """
    tokens: torch.Tensor
    H: int
    W: int
    lh: int
    lw: int

    @property
    def nh(self) -> int:
        return -(-self.H // self.lh)

    @property
    def nw(self) -> int:
        return -(-self.W // self.lw)

    def with_tokens(self, tokens: torch.Tensor) -> "WindowGrid":
        return WindowGrid(tokens, self.H, self.W, self.lh, self.lw)


def reflect_index(n: int, size: int) -> torch.Tensor:
    """Indices ``0..size-1`` folded into ``[0, n)`` by repeated reflection."""
    i = torch.arange(size)
    if n == 1:
        return torch.zeros(size, dtype=torch.long)
    period = 2 * n - 2
    m = i % period
    return torch.where(m < n, m, period - m)


def window_partition(f: torch.Tensor, l: int | None) -> WindowGrid:
    """Split ``f (B, C, H, W)`` into ``l x l`` windows.

    ``l=None`` makes one whole-frame window.  Sizes not divisible by ``l``
    are reflect-padded on the bottom/right; :func:`window_merge` strips the
    padding again.
    """
    B, C, H, W = f.shape
    if l is None:
        lh, lw = H, W
    else:
        if l < 2:
            raise ContractError(f"window side must be >= 2, got {l}")
        lh = lw = l
    Hp, Wp = -(-H // lh) * lh, -(-W // lw) * lw
    if Hp != H:
        f = f.index_select(2, reflect_index(H, Hp))
    if Wp != W:
        f = f.index_select(3, reflect_index(W, Wp))
    nh, nw = Hp // lh, Wp // lw
    t = f.reshape(B, C, nh, lh, nw, lw).permute(0, 2, 4, 3, 5, 1)
    return WindowGrid(t.reshape(B, nh * nw, lh * lw, C), H, W, lh, lw)


def window_merge(g: WindowGrid, H: int | None = None, W: int | None = None) -> torch.Tensor:
    """Inverse of :func:`window_partition`; returns ``(B, C, H, W)``."""
    H = g.H if H is None else H
    W = g.W if W is None else W
    nh, nw = -(-H // g.lh), -(-W // g.lw)
    B, nwin, L, C = g.tokens.shape
    if nwin != nh * nw or L != g.lh * g.lw:
        raise ContractError(
            f"window grid {nwin}x{L} inconsistent with H={H}, W={W}, window {g.lh}x{g.lw}")
    t = g.tokens.reshape(B, nh, nw, g.lh, g.lw, C).permute(0, 5, 1, 3, 2, 4)
    f = t.reshape(B, C, nh * g.lh, nw * g.lw)
    return f[:, :, :H, :W]


# -- learnable position embedding --------------------------------------------

class LPE(nn.Module):
    """Zero-padded depthwise 2D convolution applied to window tokens."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size,
                              padding=kernel_size // 2, groups=channels)

    def forward(self, seq: torch.Tensor, lh: int, lw: int) -> torch.Tensor:
        return lpe(seq, lh, lw, self.conv.weight, self.conv.bias)


def lpe(seq: torch.Tensor, lh: int, lw: int, kernel: torch.Tensor,
        bias: torch.Tensor | None = None) -> torch.Tensor:
    """Reshape ``seq (..., lh*lw, C)`` to 2D, depthwise-convolve, flatten back."""
    L, C = seq.shape[-2:]
    if L != lh * lw:
        raise ContractError(f"token count {L} is not {lh}x{lw}")
    lead = seq.shape[:-2]
    img = seq.reshape(-1, lh, lw, C).permute(0, 3, 1, 2)
    out = F.conv2d(img, kernel, bias, padding=kernel.shape[-1] // 2, groups=C)
    return out.permute(0, 2, 3, 1).reshape(*lead, L, C)


# -- tokenwise MLP -------------------------------------------------------------

class MLP(nn.Module):
    """LayerNorm -> Linear(x2) -> GELU -> Linear.  Output layer starts at zero."""

    def __init__(self, dim: int, ratio: int = 2):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(self.norm(x))))


# -- reconstruction conv blocks ----------------------------------------------

class LKSB(nn.Module):
    """Large-kernel separable block: depthwise ``k x k``, then two pointwise
    convolutions with an activation between them, plus the input."""

    def __init__(self, channels: int, k: int = 7, expand: int = 2):
        super().__init__()
        if k % 2 == 0:
            raise ContractError(f"LKSB kernel size must be odd, got {k}")
        self.dw = nn.Conv2d(channels, channels, k, padding=k // 2, groups=channels)
        self.pw1 = nn.Conv2d(channels, channels * expand, 1)
        self.pw2 = nn.Conv2d(channels * expand, channels, 1)
        nn.init.zeros_(self.pw2.weight)
        nn.init.zeros_(self.pw2.bias)

    def forward(self, f):
        return f + self.pw2(F.gelu(self.pw1(self.dw(f))))


class ResBlock(nn.Module):
    """Two 3x3 convolutions with a ReLU and identity skip (ablation baseline)."""

    def __init__(self, channels: int, k: int = 3):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, k, padding=k // 2)
        self.conv2 = nn.Conv2d(channels, channels, k, padding=k // 2)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, f):
        return f + self.conv2(F.relu(self.conv1(f)))


class DWBlock(nn.Module):
    """Inverted residual: pointwise expand, depthwise 3x3, pointwise project."""

    def __init__(self, channels: int, k: int = 3, expand: int = 4):
        super().__init__()
        hidden = channels * expand
        self.pw1 = nn.Conv2d(channels, hidden, 1)
        self.dw = nn.Conv2d(hidden, hidden, k, padding=k // 2, groups=hidden)
        self.pw2 = nn.Conv2d(hidden, channels, 1)
        nn.init.zeros_(self.pw2.weight)
        nn.init.zeros_(self.pw2.bias)

    def forward(self, f):
        return f + self.pw2(F.relu6(self.dw(F.relu6(self.pw1(f)))))


class PBlock(nn.Module):
    """Partial convolution on a quarter of the channels, then a pointwise MLP."""

    def __init__(self, channels: int, k: int = 3, expand: int = 2):
        super().__init__()
        self.part = max(1, channels // 4)
        self.pconv = nn.Conv2d(self.part, self.part, k, padding=k // 2)
        self.pw1 = nn.Conv2d(channels, channels * expand, 1)
        self.pw2 = nn.Conv2d(channels * expand, channels, 1)
        nn.init.zeros_(self.pw2.weight)
        nn.init.zeros_(self.pw2.bias)

    def forward(self, f):
        a, b = f.split([self.part, f.shape[1] - self.part], dim=1)
        mixed = torch.cat([self.pconv(a), b], dim=1)
        return f + self.pw2(F.gelu(self.pw1(mixed)))


RECON_BLOCKS = {"lksb": LKSB, "resblock": ResBlock, "dwblock": DWBlock, "pblock": PBlock}


def make_recon_block(kind: str, channels: int, k: int) -> nn.Module:
    if kind not in RECON_BLOCKS:
        raise ContractError(f"unknown reconstruction block {kind!r}")
    if kind == "lksb":
        return LKSB(channels, k)
    return RECON_BLOCKS[kind](channels)


# -- sampling ------------------------------------------------------------------

def bilinear_sample(f: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``f (N, C, H, W)`` at real pixel positions ``coords (N, Ho, Wo, 2)``.

    ``coords[..., 0]`` is x (column), ``coords[..., 1]`` is y (row).  Taps
    falling outside the map read zero.  Integer positions reproduce ``f``
    exactly.
    """
    if torch.isnan(coords).any():
        raise NumericError("bilinear_sample: NaN sampling coordinates")
    N, C, H, W = f.shape
    Ho, Wo = coords.shape[1:3]
    x, y = coords[..., 0], coords[..., 1]
    x0, y0 = torch.floor(x), torch.floor(y)
    wx1, wy1 = x - x0, y - y0
    wx0, wy0 = 1 - wx1, 1 - wy1
    x0, y0 = x0.long(), y0.long()
    flat = f.reshape(N, C, H * W)
    out = None
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1)).reshape(N, 1, Ho * Wo)
            vals = flat.gather(2, idx.expand(N, C, Ho * Wo)).reshape(N, C, Ho, Wo)
            w = (wx * wy * valid.to(f.dtype)).unsqueeze(1)
            term = vals * w
            out = term if out is None else out + term
    return out


def grid_sample_pixels(f: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Same contract as :func:`bilinear_sample`, backed by ``F.grid_sample``.

    Faster, but the pixel/normalised coordinate round trip costs a few ulps,
    so integer positions are not reproduced bit for bit.
    """
    H, W = f.shape[-2:]
    sx = 2.0 / (W - 1) if W > 1 else 0.0
    sy = 2.0 / (H - 1) if H > 1 else 0.0
    grid = torch.stack([coords[..., 0] * sx - 1, coords[..., 1] * sy - 1], dim=-1)
    return F.grid_sample(f, grid, mode="bilinear", padding_mode="zeros", align_corners=True)


def pixel_grid(H: int, W: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """``(H, W, 2)`` grid of integer ``(x, y)`` positions."""
    ys, xs = torch.meshgrid(torch.arange(H, dtype=dtype, device=device),
                            torch.arange(W, dtype=dtype, device=device), indexing="ij")
    return torch.stack([xs, ys], dim=-1)


# -- deformable alignment ------------------------------------------------------

def deform_conv(x: torch.Tensor, offset: torch.Tensor, mask: torch.Tensor,
                weight: torch.Tensor, bias: torch.Tensor | None, groups: int,
                sampler=grid_sample_pixels) -> torch.Tensor:
    """Modulated deformable convolution (stride 1, same padding).

    ``offset (B, 2*G*K, H, W)`` holds ``(dy, dx)`` pairs ordered by group,
    then tap; ``mask (B, G*K, H, W)``; ``weight (O, Cin, k, k)``.  This is
    the layout :func:`torchvision.ops.deform_conv2d` uses.
    """
    B, Cin, H, W = x.shape
    O, _, k, _ = weight.shape
    K, G = k * k, groups
    if Cin % G:
        raise ContractError(f"{Cin} channels not divisible into {G} offset groups")
    Cg = Cin // G
    off = offset.reshape(B, G, K, 2, H, W)
    base = pixel_grid(H, W, x.dtype, x.device)                   # (H, W, 2) as (x, y)
    ky, kx = torch.meshgrid(torch.arange(k), torch.arange(k), indexing="ij")
    taps = torch.stack([kx.flatten(), ky.flatten()], -1).to(x.dtype) - k // 2  # (K, 2)
    # (B, G, K, H, W, 2) sampling positions, offsets given as (dy, dx)
    pos = base + taps[:, None, None, :] + off.flip(3).permute(0, 1, 2, 4, 5, 3)
    coords = pos.reshape(B * G, K * H, W, 2)
    sampled = sampler(x.reshape(B * G, Cg, H, W), coords)
    sampled = sampled.reshape(B, G, Cg, K, H, W) * mask.reshape(B, G, 1, K, H, W)
    cols = sampled.reshape(B, Cin * K, H, W)
    return F.conv2d(cols, weight.reshape(O, Cin * K, 1, 1), bias)


class DeformableAlign(nn.Module):
    """Deformable convolution over ``f_cat`` with offsets/modulation from ``f_guide``.

    The offset head is a small residual conv stack whose last layer is zero
    at init, so offsets start at 0 and modulation at 0.5.
    """

    def __init__(self, guide_channels: int, in_channels: int, out_channels: int,
                 k: int = 3, groups: int = 4, max_offset: float = 10.0):
        super().__init__()
        self.k, self.groups, self.max_offset = k, groups, max_offset
        self.head_res = nn.Sequential(
            nn.Conv2d(guide_channels, guide_channels, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(guide_channels, guide_channels, 3, padding=1),
        )
        self.head_out = nn.Conv2d(guide_channels, 3 * groups * k * k, 3, padding=1)
        nn.init.zeros_(self.head_out.weight)
        nn.init.zeros_(self.head_out.bias)
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, k, k))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)

    def offsets(self, f_guide: torch.Tensor):
        h = F.leaky_relu(f_guide + self.head_res(f_guide), 0.1)
        o1, o2, m = self.head_out(h).chunk(3, dim=1)
        offset = self.max_offset * torch.tanh(torch.cat([o1, o2], dim=1))
        return offset, torch.sigmoid(m)

    def forward(self, f_guide: torch.Tensor, f_cat: torch.Tensor) -> torch.Tensor:
        if f_guide.shape[-2:] != f_cat.shape[-2:]:
            raise ContractError(
                f"guide {tuple(f_guide.shape[-2:])} and features {tuple(f_cat.shape[-2:])} not aligned")
        offset, mask = self.offsets(f_guide)
        return deform_conv(f_cat, offset, mask, self.weight, self.bias, self.groups)
