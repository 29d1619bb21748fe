"""Inner state-space reconstruction and x4 upsampling."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import MLP, make_recon_block, window_merge, window_partition
from .errors import ContractError, UnsupportedConfigError
from .resize import bicubic_up
from .ssm import SelectiveProjection, headed_scan


class ISSB(nn.Module):
    """Fuse branch features with a 1x1 conv, then self-scan each window.

    With ``cat=True`` the scanned output ``y`` and the gate ``z`` are each
    half the model width and are concatenated before the output projection.
    ``cat=False`` is the multiplicative-gate variant at full width.
    """

    def __init__(self, dim: int, branches: int, d_state: int, heads: int,
                 window: int | None = 16, cat: bool = True):
        super().__init__()
        if cat and dim % 2:
            raise ContractError("concatenation variant needs an even width")
        self.window, self.cat = window, cat
        inner = dim // 2 if cat else dim
        self.reduce = nn.Conv2d(branches * dim, dim, 1)
        self.proj = SelectiveProjection(dim, inner, d_state, heads, with_c=True)
        self.gate = nn.Linear(dim, inner, bias=False)
        self.out_norm = nn.LayerNorm(2 * inner if cat else inner)
        self.out_proj = nn.Linear(2 * inner if cat else inner, dim)

    def forward(self, branch_feats: list[torch.Tensor]) -> torch.Tensor:
        if len({tuple(f.shape) for f in branch_feats}) != 1:
            raise ContractError("issb: branch features differ in shape")
        fused = self.reduce(torch.cat(branch_feats, dim=1))
        grid = window_partition(fused, self.window)
        v = grid.tokens
        x, Bbar, delta, C = self.proj(v)
        y = headed_scan(x, Bbar, delta, self.proj.A, C)
        z = F.silu(self.gate(self.proj.norm(v)))
        mixed = torch.cat([y, z], dim=-1) if self.cat else z * y
        g_hat = self.out_proj(self.out_norm(mixed)) + v
        return window_merge(grid.with_tokens(g_hat))


class ISSR(nn.Module):
    """``g = blocks(MLP(g_hat) + g_hat)`` with ``g_hat = ISSB(branch features)``."""

    def __init__(self, dim: int, branches: int, d_state: int, heads: int,
                 window: int | None = 16, cat: bool = True, depth: int = 3,
                 k: int = 7, block: str = "lksb"):
        super().__init__()
        self.issb = ISSB(dim, branches, d_state, heads, window, cat)
        self.mlp = MLP(dim)
        self.blocks = nn.Sequential(*(make_recon_block(block, dim, k) for _ in range(depth)))

    def forward(self, branch_feats: list[torch.Tensor]) -> torch.Tensor:
        g_hat = self.issb(branch_feats).permute(0, 2, 3, 1)
        g = (self.mlp(g_hat) + g_hat).permute(0, 3, 1, 2)
        return self.blocks(g)


class Upsampler(nn.Module):
    """Two (conv -> pixel shuffle x2 -> LeakyReLU) stages, a conv to RGB and a
    bicubic x4 skip from the LR frame.  The last conv starts at zero."""

    def __init__(self, dim: int, scale: int = 4):
        super().__init__()
        if scale != 4:
            raise UnsupportedConfigError(f"only x4 upsampling is supported, got x{scale}")
        self.scale = scale
        self.up1 = nn.Conv2d(dim, dim * 4, 3, padding=1)
        self.up2 = nn.Conv2d(dim, dim * 4, 3, padding=1)
        self.last = nn.Conv2d(dim, 3, 3, padding=1)
        nn.init.zeros_(self.last.weight)
        nn.init.zeros_(self.last.bias)

    def forward(self, g: torch.Tensor, lr: torch.Tensor, clamp: bool = False) -> torch.Tensor:
        h = F.leaky_relu(F.pixel_shuffle(self.up1(g), 2), 0.1)
        h = F.leaky_relu(F.pixel_shuffle(self.up2(h), 2), 0.1)
        out = self.last(h) + bicubic_up(lr, self.scale)
        return out.clamp(0, 1) if clamp else out
