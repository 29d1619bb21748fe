"""Discretized selective state-space machinery.

Sequences are laid out as ``(..., L, D)``: any number of leading batch
axes, then tokens, then channels.  The state size is ``N``.  ``A`` is one
negative-real scalar per channel (or per head in the fast path), so the
discretized transition ``Abar`` is elementwise.

Two routes compute the same recurrence:

* :func:`ssm_scan` / :func:`cross_scan` walk the tokens in order.  They are
  the reference path and accept any ``h0``.
* :func:`ssd_scan` forms masked decay matrices over short chunks and
  carries the state across chunk boundaries.  The model uses it because a Python loop over
  256 tokens is too slow on CPU; tests pin it to :func:`cross_scan`.

:func:`ssm_kernel_apply` is the time-invariant convolution form and only
serves as an oracle.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, DomainError, NumericError


def discretize(A: torch.Tensor, B: torch.Tensor, delta: torch.Tensor,
               exact: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-order-hold discretization for scalar-per-channel ``A``.

    Args:
        A: transition values, shape ``(D,)`` (broadcast against ``delta``).
        B: input values, shape ``(..., L, N)``.
        delta: positive timescales, shape ``(..., L, D)``.
        exact: use ``(dA)^-1 (exp(dA) - 1) dB`` instead of the simplified
            ``B_bar = delta * B``.

    Returns:
        ``Abar`` of shape ``(..., L, D)`` and ``Bbar`` of shape
        ``(..., L, D, N)``.
    """
    if not (torch.isfinite(A).all() and torch.isfinite(B).all()
            and torch.isfinite(delta).all()):
        raise NumericError("discretize: non-finite input")
    if (delta <= 0).any():
        raise DomainError("discretize: timescale must be positive")
    dA = delta * A
    Abar = torch.exp(dA)
    if exact:
        # expm1(z)/z -> 1 as z -> 0; the series keeps the limit exact
        small = dA.abs() < 1e-8
        safe = torch.where(small, torch.ones_like(dA), dA)
        phi = torch.where(small, 1.0 + 0.5 * dA, torch.expm1(safe) / safe)
        scale = phi * delta
    else:
        scale = delta
    Bbar = scale.unsqueeze(-1) * B.unsqueeze(-2)
    return Abar, Bbar


def _check_scan_shapes(Abar, Bbar, C, x):
    L, D = x.shape[-2:]
    if Abar.shape[-2:] != (L, D):
        raise ContractError(f"Abar shape {tuple(Abar.shape)} does not match x {tuple(x.shape)}")
    if Bbar.shape[-3:-1] != (L, D):
        raise ContractError(f"Bbar shape {tuple(Bbar.shape)} does not match x {tuple(x.shape)}")
    if C.shape[-2] != L or C.shape[-1] != Bbar.shape[-1]:
        raise ContractError(f"C shape {tuple(C.shape)} incompatible with L={L}, N={Bbar.shape[-1]}")


def ssm_scan(Abar: torch.Tensor, Bbar: torch.Tensor, C: torch.Tensor,
             x: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
    """Sequential recurrence ``h_i = Abar_i h_{i-1} + Bbar_i x_i``, ``y_i = C_i h_i``.

    Shapes: ``Abar (..., L, D)``, ``Bbar (..., L, D, N)``, ``C (..., L, N)``,
    ``x (..., L, D)``, ``h0 (..., D, N)``.  Returns ``y (..., L, D)``.
    """
    _check_scan_shapes(Abar, Bbar, C, x)
    L = x.shape[-2]
    if h0 is None:
        h = x.new_zeros(*x.shape[:-2], x.shape[-1], Bbar.shape[-1])
    else:
        h = h0
    ys = []
    for i in range(L):
        h = Abar[..., i, :, None] * h + Bbar[..., i, :, :] * x[..., i, :, None]
        ys.append((h * C[..., i, None, :]).sum(-1))
    return torch.stack(ys, dim=-2)


def cross_scan(x_near: torch.Tensor, Bbar_near: torch.Tensor, Abar_near: torch.Tensor,
               C_far: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
    """Run the near sequence's recurrence and read it out through ``C_far``.

    ``C_far`` comes from a different (distant-frame) token sequence with the
    same window geometry; the hidden trajectory is entirely the near one.
    """
    if C_far.shape[-2] != x_near.shape[-2]:
        raise ContractError(
            f"cross_scan: token length mismatch {C_far.shape[-2]} vs {x_near.shape[-2]}")
    return ssm_scan(Abar_near, Bbar_near, C_far, x_near, h0)


def scan_kernel(Abar: torch.Tensor, Bbar: torch.Tensor, C: torch.Tensor, L: int) -> torch.Tensor:
    """Taps ``K_i = C Abar^i Bbar`` of the time-invariant system, shape ``(L, D)``.

    ``Abar (D,)``, ``Bbar (D, N)``, ``C (N,)``.
    """
    powers = Abar[None, :] ** torch.arange(L, dtype=Abar.dtype)[:, None]
    return powers * (Bbar * C).sum(-1)[None, :]


def ssm_kernel_apply(Abar: torch.Tensor, Bbar: torch.Tensor, C: torch.Tensor,
                     x: torch.Tensor) -> torch.Tensor:
    """Causal convolution of ``x (..., L, D)`` with the structured kernel.

    Parameters must be time-invariant: pass ``Abar (D,)``, ``Bbar (D, N)``,
    ``C (N,)``.  Token-varying parameters are rejected; use
    :func:`ssm_scan` for those.
    """
    if Abar.dim() != 1 or Bbar.dim() != 2 or C.dim() != 1:
        raise ContractError("ssm_kernel_apply requires time-invariant parameters")
    L = x.shape[-2]
    K = scan_kernel(Abar, Bbar, C, L)
    # Toeplitz: T[i, j, d] = K[i - j, d] for j <= i
    idx = torch.arange(L)
    lag = idx[:, None] - idx[None, :]
    toeplitz = K[lag.clamp(min=0)] * (lag >= 0)[..., None].to(K.dtype)
    return torch.einsum("ijd,...jd->...id", toeplitz, x)


def segsum(dA: torch.Tensor) -> torch.Tensor:
    """``out[..., i, j] = sum_{j < k <= i} dA[..., k]`` for ``j <= i``, ``-inf`` above.

    Built from masked cumulative sums rather than a difference of prefix
    sums so that long windows keep full precision.
    """
    L = dA.shape[-1]
    rep = dA[..., None].expand(*dA.shape, L)  # rep[..., k, j] = dA[k]
    strict = torch.tril(torch.ones(L, L, dtype=torch.bool, device=dA.device), diagonal=-1)
    rep = rep.masked_fill(~strict, 0.0)
    out = torch.cumsum(rep, dim=-2)
    causal = torch.tril(torch.ones(L, L, dtype=torch.bool, device=dA.device))
    return out.masked_fill(~causal, float("-inf"))


def ssd_scan(x: torch.Tensor, dA: torch.Tensor, Bbar_head: torch.Tensor,
             C: torch.Tensor, chunk: int = 32) -> torch.Tensor:
    """Chunked matrix form of the scan with ``h0 = 0``.

    Args:
        x: ``(..., L, H, P)`` inputs split into ``H`` heads of ``P`` channels.
        dA: ``(..., L, H)`` log-decays ``delta * A`` (``Abar = exp(dA)``).
        Bbar_head: ``(..., L, H, N)`` discretized input values per head.
        C: ``(..., L, N)`` output values (possibly from another sequence).
        chunk: tokens per chunk.  Inside a chunk the decay matrix is formed
            explicitly; chunk boundary states are carried by a short loop.

    Returns ``y (..., L, H, P)``.
    """
    L = x.shape[-3]
    Q = min(chunk, L)
    pad = (-L) % Q
    if pad:
        # trailing zero tokens cannot influence earlier outputs
        x = F.pad(x, (0, 0, 0, 0, 0, pad))
        dA = F.pad(dA, (0, 0, 0, pad))
        Bbar_head = F.pad(Bbar_head, (0, 0, 0, 0, 0, pad))
        C = F.pad(C, (0, 0, 0, pad))
    n = x.shape[-3] // Q
    xc = x.unflatten(-3, (n, Q))                         # (..., n, Q, H, P)
    Bc = Bbar_head.unflatten(-3, (n, Q))                 # (..., n, Q, H, N)
    Cc = C.unflatten(-2, (n, Q))                         # (..., n, Q, N)
    dAc = dA.unflatten(-2, (n, Q)).transpose(-1, -2)     # (..., n, H, Q)
    A_cum = torch.cumsum(dAc, dim=-1)

    # within-chunk contributions
    scores = torch.einsum("...cin,...cjhn->...chij", Cc, Bc)
    # chunks are short, so prefix-sum differences stay accurate
    causal = torch.tril(torch.ones(Q, Q, dtype=torch.bool, device=x.device))
    seg = (A_cum[..., :, None] - A_cum[..., None, :]).masked_fill(~causal, float("-inf"))
    y = torch.einsum("...chij,...cjhp->...cihp", scores * torch.exp(seg), xc)

    # state at the end of each chunk from that chunk's own tokens
    to_end = torch.exp(A_cum[..., -1:] - A_cum).transpose(-1, -2)   # (..., n, Q, H)
    states = torch.einsum("...cjhn,...cjhp->...chpn", Bc * to_end[..., None], xc)

    if n > 1:
        chunk_decay = torch.exp(A_cum[..., -1])                     # (..., n, H)
        carried = [torch.zeros_like(states[..., 0, :, :, :])]
        for k in range(n - 1):
            carried.append(carried[-1] * chunk_decay[..., k, :, None, None] + states[..., k, :, :, :])
        entering = torch.stack(carried, dim=-4)                     # (..., n, H, P, N)
        from_start = torch.exp(A_cum).transpose(-1, -2)            # (..., n, Q, H)
        y = y + torch.einsum("...cin,...chpn->...cihp", Cc, entering) * from_start[..., None]
    return y.flatten(-4, -3)[..., :L, :, :]


class SelectiveProjection(nn.Module):
    """Data-dependent SSM parameters for one token sequence.

    ``LN -> Linear -> depthwise Conv1d (same padding) -> SiLU`` gives the
    scanned input ``x`` and ``B`` (and ``C`` when ``with_c``); ``delta`` is
    ``softplus(LN(v) W_dt + dt_bias)`` per head.  ``B_bar = delta * B`` and
    ``Abar = exp(delta * A)`` with ``A = -exp(A_log)`` per head.
    """

    def __init__(self, dim: int, inner: int, d_state: int, heads: int,
                 with_c: bool = False, d_conv: int = 3,
                 dt_min: float = 1e-3, dt_max: float = 0.1):
        super().__init__()
        if inner % heads:
            raise ContractError(f"inner width {inner} not divisible by heads {heads}")
        if d_conv % 2 == 0:
            raise ContractError("d_conv must be odd for same padding")
        self.inner, self.d_state, self.heads, self.with_c = inner, d_state, heads, with_c
        self.conv_dim = inner + d_state * (2 if with_c else 1)
        self.norm = nn.LayerNorm(dim)
        self.in_proj = nn.Linear(dim, self.conv_dim + heads, bias=False)
        self.conv = nn.Conv1d(self.conv_dim, self.conv_dim, d_conv,
                              padding=d_conv // 2, groups=self.conv_dim)
        # softplus(dt_bias) spans [dt_min, dt_max] at init
        dt = torch.exp(torch.linspace(math.log(dt_min), math.log(dt_max), heads))
        self.dt_bias = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))
        self.A_log = nn.Parameter(torch.log(torch.linspace(1.0, float(heads), heads)))

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def project(self, v: torch.Tensor) -> torch.Tensor:
        """Conv-branch activations ``(..., L, conv_dim)`` and raw dt ``(..., L, H)``."""
        z = self.in_proj(self.norm(v))
        xbc, dt = z.split([self.conv_dim, self.heads], dim=-1)
        lead = xbc.shape[:-2]
        flat = xbc.reshape(-1, *xbc.shape[-2:]).transpose(1, 2)
        xbc = F.silu(self.conv(flat)).transpose(1, 2).reshape(*lead, *xbc.shape[-2:])
        return xbc, dt

    def forward(self, v: torch.Tensor):
        """Returns ``(x, Bbar, delta, C)``; ``C`` is ``None`` unless ``with_c``.

        ``Bbar`` is per head: ``(..., L, H, N)``; ``delta`` is ``(..., L, H)``.
        """
        xbc, dt = self.project(v)
        if self.with_c:
            x, B, C = xbc.split([self.inner, self.d_state, self.d_state], dim=-1)
        else:
            x, B = xbc.split([self.inner, self.d_state], dim=-1)
            C = None
        delta = F.softplus(dt + self.dt_bias)
        Bbar = delta[..., None] * B[..., None, :]
        return x, Bbar, delta, C

    def control(self, v: torch.Tensor) -> torch.Tensor:
        """The ``B`` slot of this projection applied to ``v``.

        Used as the distant-frame output matrix when the near and far paths
        share one projection.
        """
        xbc, _ = self.project(v)
        return xbc[..., self.inner:self.inner + self.d_state]


def selective_params(v: torch.Tensor, proj: SelectiveProjection):
    """Functional wrapper: ``(x, Bbar, delta)`` for tokens ``v (..., L, D)``."""
    x, Bbar, delta, _ = proj(v)
    return x, Bbar, delta


def headed_scan(x: torch.Tensor, Bbar: torch.Tensor, delta: torch.Tensor,
                A: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
    """Fast scan over ``x (..., L, inner)`` with per-head ``delta``/``A``."""
    heads = delta.shape[-1]
    xs = x.unflatten(-1, (heads, -1))
    y = ssd_scan(xs, delta * A, Bbar, C)
    return y.flatten(-2)


def expand_heads(x: torch.Tensor, Bbar: torch.Tensor, delta: torch.Tensor,
                 A: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel ``Abar (..., L, D)`` and ``Bbar (..., L, D, N)`` from headed values.

    Lets the headed fast path be checked against :func:`ssm_scan`.
    """
    P = x.shape[-1] // delta.shape[-1]
    Abar = torch.exp(delta * A).repeat_interleave(P, dim=-1)
    return Abar, Bbar.repeat_interleave(P, dim=-2)
