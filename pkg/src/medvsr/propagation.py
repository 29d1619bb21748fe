"""Cross state-space propagation: flow handling, the cross block and one recurrent step.

Flow fields are ``(B, H, W, 2)`` in pixels, ``[..., 0] = dx``, ``[..., 1] = dy``.
A flow ``o`` attached to a frame maps that frame's pixel positions into the
previous frame of the scan, so ``warp(f_prev, o)`` is ``f_prev`` resampled
onto the current frame.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import (LPE, MLP, DeformableAlign, WindowGrid, bilinear_sample,
                     pixel_grid, window_merge, window_partition)
from .errors import ContractError
from .ssm import SelectiveProjection, headed_scan

PROP_SCHEMES = ("t2t1", "t2t", "t1t", "both")
COMPOSE_MODES = ("sum", "warp_compose")


def warp(f: torch.Tensor, o: torch.Tensor) -> torch.Tensor:
    """``out(p) = f(p + o(p))`` with zero fill outside ``f``."""
    B, C, H, W = f.shape
    if o.shape != (B, H, W, 2):
        raise ContractError(f"flow {tuple(o.shape)} does not match features {tuple(f.shape)}")
    return bilinear_sample(f, pixel_grid(H, W, f.dtype, f.device) + o)


def compose_flows(o_a: torch.Tensor, o_b: torch.Tensor, mode: str = "sum") -> torch.Tensor:
    """Flow that reaches two frames back: ``o_b`` first, then ``o_a``.

    ``sum`` adds the fields pointwise.  ``warp_compose`` follows ``o_b`` and
    then samples ``o_a`` where it landed.
    """
    if o_a.shape != o_b.shape:
        raise ContractError(f"flow shapes differ: {tuple(o_a.shape)} vs {tuple(o_b.shape)}")
    if mode == "sum":
        return o_a + o_b
    if mode == "warp_compose":
        return o_b + warp(o_a.permute(0, 3, 1, 2), o_b).permute(0, 2, 3, 1)
    raise ContractError(f"unknown compose mode {mode!r}")


class CSSB(nn.Module):
    """Cross state-space block.

    The near sequence drives the recurrence (``x``, ``Bbar``, ``delta``); the
    far sequence supplies the output matrix ``C``.  ``separate=False`` reuses
    the near projection for the far path, ``lpe=False`` drops the position
    embedding on ``C``.
    """

    def __init__(self, dim: int, d_state: int, heads: int, lpe: bool = True,
                 separate: bool = True, d_conv: int = 3):
        super().__init__()
        self.separate = separate
        self.near = SelectiveProjection(dim, dim, d_state, heads, d_conv=d_conv)
        if separate:
            self.far_norm = nn.LayerNorm(dim)
            self.far_proj = nn.Linear(dim, d_state, bias=False)
            self.far_conv = nn.Conv1d(d_state, d_state, d_conv, padding=d_conv // 2, groups=d_state)
        self.lpe = LPE(d_state) if lpe else None
        self.gate = nn.Linear(dim, dim, bias=False)
        self.out_norm = nn.LayerNorm(dim)
        self.out_proj = nn.Linear(dim, dim)

    def control(self, v_far: WindowGrid) -> torch.Tensor:
        """Output matrix ``C`` per far token: ``(B, nW, L, N)``."""
        t = v_far.tokens
        if self.separate:
            c = self.far_proj(self.far_norm(t))
            shape = c.shape
            c = self.far_conv(c.reshape(-1, *shape[-2:]).transpose(1, 2))
            c = F.silu(c).transpose(1, 2).reshape(shape)
        else:
            c = self.near.control(t)
        if self.lpe is not None:
            c = self.lpe(c, v_far.lh, v_far.lw)
        return c

    def forward(self, v_far: WindowGrid, v_near: WindowGrid) -> WindowGrid:
        if v_far.tokens.shape[:3] != v_near.tokens.shape[:3] or (v_far.lh, v_far.lw) != (v_near.lh, v_near.lw):
            raise ContractError("cssb: far and near window geometry differ")
        t = v_near.tokens
        x, Bbar, delta, _ = self.near(t)
        y = headed_scan(x, Bbar, delta, self.near.A, self.control(v_far))
        z = F.silu(self.gate(self.near.norm(t)))
        return v_near.with_tokens(self.out_proj(self.out_norm(z * y)))


class CSSPStep(nn.Module):
    """One recurrent step of a propagation branch.

    ``scheme`` picks which sequences meet in the cross block:

    * ``t2t1`` -- warped ``t-2`` controls ``t-1`` (default)
    * ``t2t``  -- warped ``t-2`` controls ``t``
    * ``t1t``  -- warped ``t-1`` controls ``t``
    * ``both`` -- ``t2t`` and ``t1t`` with separate blocks, summed

    ``use_cssb=False`` skips the cross block and MLP entirely so the output
    depends on the deformable alignment path only.
    """

    def __init__(self, dim: int, d_state: int, heads: int, window: int | None = 16,
                 lpe: bool = True, separate: bool = True, scheme: str = "t2t1",
                 compose_mode: str = "sum", use_cssb: bool = True, dcn_groups: int = 4,
                 max_offset: float = 10.0):
        super().__init__()
        if scheme not in PROP_SCHEMES:
            raise ContractError(f"unknown propagation scheme {scheme!r}")
        if compose_mode not in COMPOSE_MODES:
            raise ContractError(f"unknown compose mode {compose_mode!r}")
        self.window, self.scheme, self.compose_mode, self.use_cssb = window, scheme, compose_mode, use_cssb
        if use_cssb:
            n_blocks = 2 if scheme == "both" else 1
            self.cssb = nn.ModuleList(
                CSSB(dim, d_state, heads, lpe=lpe, separate=separate) for _ in range(n_blocks))
            self.mlp = MLP(dim)
        self.align = DeformableAlign(dim, 3 * dim, dim, groups=dcn_groups, max_offset=max_offset)

    def _support(self, far: torch.Tensor, near: torch.Tensor) -> torch.Tensor:
        v_near = window_partition(near, self.window)
        fars = far if isinstance(far, list) else [far]
        v_hat = v_near.tokens
        for block, f in zip(self.cssb, fars):
            v_hat = v_hat + block(window_partition(f, self.window), v_near).tokens
        v_tilde = self.mlp(v_hat) + v_hat
        return window_merge(v_near.with_tokens(v_tilde))

    def forward(self, f_tm2, f_tm1, f_t, o_tm2, o_tm1):
        if not (f_tm2.shape == f_tm1.shape == f_t.shape):
            raise ContractError("cssp_step: feature shapes differ")
        f_bar_tm1 = warp(f_tm1, o_tm1)
        if not self.use_cssb:
            f_tilde = f_tm1 if self.scheme == "t2t1" else f_t
        else:
            f_bar_tm2 = warp(f_tm2, compose_flows(o_tm2, o_tm1, self.compose_mode))
            if self.scheme == "t2t1":
                f_tilde = self._support(f_bar_tm2, f_tm1)
            elif self.scheme == "t2t":
                f_tilde = self._support(f_bar_tm2, f_t)
            elif self.scheme == "t1t":
                f_tilde = self._support(f_bar_tm1, f_t)
            else:
                f_tilde = self._support([f_bar_tm2, f_bar_tm1], f_t)
        return self.align(f_tm1, torch.cat([f_tilde, f_bar_tm1, f_t], dim=1))


def cssp_step(step: CSSPStep, f_tm2, f_tm1, f_t, o_tm2, o_tm1):
    """Functional alias for :meth:`CSSPStep.forward`."""
    return step(f_tm2, f_tm1, f_t, o_tm2, o_tm1)
