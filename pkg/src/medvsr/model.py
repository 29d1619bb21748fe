"""End-to-end network: feature extraction, propagation branches, reconstruction."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import FlowEstimator, clip_flows
from .errors import ContractError, UnsupportedConfigError
from .propagation import COMPOSE_MODES, PROP_SCHEMES, CSSPStep
from .reconstruction import ISSR, Upsampler
from .blocks import RECON_BLOCKS


@dataclass
class ModelConfig:
    width: int = 32
    d_state: int = 16
    heads: int = 4
    window: int = 16
    branches: int = 4
    k: int = 7
    depth: int = 3
    scale: int = 4
    flow_method: str = "block_match"
    flow_block: int = 8
    flow_radius: int = 4
    # ablation switches
    lpe: bool = True
    cssb_lw: bool = True
    sp: bool = True
    issb_lw: bool = True
    cat: bool = True
    prop_scheme: str = "t2t1"
    compose_mode: str = "sum"
    recon_block: str = "lksb"
    use_cssb: bool = True
    dcn_groups: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.scale != 4:
            raise UnsupportedConfigError(f"scale must be 4, got {self.scale}")
        if self.branches < 1 or self.branches % 2:
            raise ContractError(f"branches must be a positive even number, got {self.branches}")
        if self.window < 2:
            raise ContractError(f"window must be >= 2, got {self.window}")
        if self.k % 2 == 0:
            raise ContractError(f"kernel size must be odd, got {self.k}")
        if self.width % self.heads or (self.cat and (self.width // 2) % self.heads):
            raise ContractError(f"width {self.width} incompatible with {self.heads} heads")
        if (3 * self.width) % self.dcn_groups:
            raise ContractError(f"3*width not divisible by {self.dcn_groups} offset groups")
        if self.prop_scheme not in PROP_SCHEMES:
            raise ContractError(f"unknown prop_scheme {self.prop_scheme!r}")
        if self.compose_mode not in COMPOSE_MODES:
            raise ContractError(f"unknown compose_mode {self.compose_mode!r}")
        if self.recon_block not in RECON_BLOCKS:
            raise ContractError(f"unknown recon_block {self.recon_block!r}")
        FlowEstimator(self.flow_method, self.flow_block, self.flow_radius)

    @property
    def flow_estimator(self) -> FlowEstimator:
        return FlowEstimator(self.flow_method, self.flow_block, self.flow_radius)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PAPER_CONFIG = dict(width=64, d_state=64, heads=8, window=16, branches=4, k=7, depth=3)


class ResidualConv(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class FeatureExtractor(nn.Module):
    """Per-frame 3 -> width conv followed by two residual conv blocks."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv2d(3, dim, 3, padding=1)
        self.body = nn.Sequential(ResidualConv(dim), ResidualConv(dim))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.body(F.leaky_relu(self.conv(frames), 0.1))


class MedVSR(nn.Module):
    """Recurrent x4 video super-resolution network.

    Branch ``j`` (0-based) runs backward in time for even ``j`` and forward
    for odd ``j``; it consumes the per-frame outputs of branch ``j - 1``.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        cfg.validate()
        self.extract = FeatureExtractor(cfg.width)
        self.branches = nn.ModuleList(
            CSSPStep(cfg.width, cfg.d_state, cfg.heads,
                     window=cfg.window if cfg.cssb_lw else None,
                     lpe=cfg.lpe, separate=cfg.sp, scheme=cfg.prop_scheme,
                     compose_mode=cfg.compose_mode, use_cssb=cfg.use_cssb,
                     dcn_groups=cfg.dcn_groups)
            for _ in range(cfg.branches))
        self.issr = ISSR(cfg.width, cfg.branches, cfg.d_state, cfg.heads,
                         window=cfg.window if cfg.issb_lw else None, cat=cfg.cat,
                         depth=cfg.depth, k=cfg.k, block=cfg.recon_block)
        self.upsample = Upsampler(cfg.width, cfg.scale)

    def extract_features(self, lr: torch.Tensor) -> torch.Tensor:
        """``(B, T, 3, H, W) -> (B, T, width, H, W)``, frame by frame."""
        B, T = lr.shape[:2]
        return self.extract(lr.flatten(0, 1)).unflatten(0, (B, T))

    def propagate(self, feats: torch.Tensor, to_prev: torch.Tensor,
                  to_next: torch.Tensor) -> list[torch.Tensor]:
        """Run every branch; returns one ``(B, T, width, H, W)`` tensor per branch."""
        B, T, _, H, W = feats.shape
        zeros = feats.new_zeros(B, H, W, 2)
        current = list(feats.unbind(1))
        outputs = []
        for j, step in enumerate(self.branches):
            backward = j % 2 == 0
            order = list(range(T - 1, -1, -1)) if backward else list(range(T))
            flow_to_pred = to_next if backward else to_prev
            out = [None] * T
            for s, t in enumerate(order):
                if s == 0:
                    f2 = f1 = current[t]
                    o2 = o1 = zeros
                elif s == 1:
                    f2 = f1 = out[order[0]]
                    o1, o2 = flow_to_pred[:, t], zeros
                else:
                    f1, f2 = out[order[s - 1]], out[order[s - 2]]
                    o1, o2 = flow_to_pred[:, t], flow_to_pred[:, order[s - 1]]
                out[t] = step(f2, f1, current[t], o2, o1)
            current = out
            outputs.append(torch.stack(out, dim=1))
        return outputs

    def forward(self, lr: torch.Tensor, to_prev: torch.Tensor | None = None,
                to_next: torch.Tensor | None = None, clamp: bool = False) -> torch.Tensor:
        """``lr (B, T, 3, H, W)`` -> SR ``(B, T, 3, 4H, 4W)``.

        Flows are ``(B, T, H, W, 2)``; missing flows are treated as zero.
        """
        if lr.dim() != 5 or lr.shape[1] < 1:
            raise ContractError(f"expected (B, T>=1, 3, H, W), got {tuple(lr.shape)}")
        B, T, _, H, W = lr.shape
        if to_prev is None:
            to_prev = lr.new_zeros(B, T, H, W, 2)
        if to_next is None:
            to_next = lr.new_zeros(B, T, H, W, 2)
        feats = self.extract_features(lr)
        branch_outs = self.propagate(feats, to_prev, to_next)
        g = self.issr([b.flatten(0, 1) for b in branch_outs])
        sr = self.upsample(g, lr.flatten(0, 1), clamp=clamp)
        return sr.unflatten(0, (B, T))


def flows_for(lr_clips: np.ndarray, est: FlowEstimator, dtype=torch.float32):
    """Flow tensors ``(B, T, H, W, 2)`` for a batch of LR clips ``(B, T, H, W, 3)``."""
    prev, nxt = zip(*(clip_flows(c, est) for c in lr_clips))
    return (torch.as_tensor(np.stack(prev), dtype=dtype),
            torch.as_tensor(np.stack(nxt), dtype=dtype))


def clip_to_tensor(clips: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(B, T, H, W, 3)`` array -> ``(B, T, 3, H, W)`` tensor."""
    return torch.as_tensor(np.ascontiguousarray(np.moveaxis(clips, -1, 2)), dtype=dtype)


def tensor_to_clip(x: torch.Tensor) -> np.ndarray:
    """``(T, 3, H, W)`` tensor -> ``(T, H, W, 3)`` float64 array."""
    return np.moveaxis(x.detach().to(torch.float64).numpy(), 1, -1)


@torch.no_grad()
def forward_clip(model: MedVSR, clip: np.ndarray) -> np.ndarray:
    """Super-resolve one LR clip ``(T, H, W, 3)``; output clamped to ``[0, 1]``."""
    if len(clip) == 0:
        raise ContractError("empty clip")
    model.eval()
    to_prev, to_next = flows_for(clip[None], model.config.flow_estimator)
    sr = model(clip_to_tensor(clip[None]), to_prev, to_next, clamp=True)
    return tensor_to_clip(sr[0])


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
