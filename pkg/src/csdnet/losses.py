"""Training objectives: attentive transfer losses and the boundary-aware SOD loss.

Tensors are ``(B, C, H, W)``; unbatched ``(C, H, W)`` inputs are accepted by
the normalization helpers.  Scalar losses are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DegenerateAttentionError, DomainError

NORM_EPS = 1e-12
IOU_SMOOTH = 1.0
BCE_CLAMP = 1e-6

STL_STAGES = (3, 4, 5)
GTL_STAGES = (1, 2, 3)


@dataclass
class TransferWeights:
    w1: float = 1.0
    w2: float = 0.5
    w3: float = 0.5
    w4: float = 0.5

    def __post_init__(self):
        bad = [k for k, v in self.__dict__.items() if not v >= 0]
        if bad:
            raise DomainError(f"transfer weights must be >= 0: {', '.join(bad)}")


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise DomainError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def gnorm(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Divide a non-negative vector by its sum along ``dim``."""
    total = v.sum(dim=dim, keepdim=True)
    if bool((total <= 0).any()):
        raise DegenerateAttentionError("cannot normalize an all-zero attention vector")
    return v / total


def l2norm_plane(x: torch.Tensor) -> torch.Tensor:
    """Scale every channel plane to unit Euclidean norm."""
    norm = torch.sqrt((x * x).sum(dim=(-2, -1), keepdim=True) + NORM_EPS)
    return x / norm


def l2norm_channel(x: torch.Tensor) -> torch.Tensor:
    """Scale the channel vector at every location to unit Euclidean norm."""
    norm = torch.sqrt((x * x).sum(dim=-3, keepdim=True) + NORM_EPS)
    return x / norm


class ChannelAttention(nn.Module):
    """Per-channel transfer weights from a detached feature map.

    avg-pool -> 1x1 conv -> ReLU -> 1x1 conv -> sigmoid -> gnorm over channels.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        s = F.adaptive_avg_pool2d(f.detach(), 1)
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return gnorm(s.flatten(1), dim=1)  # (B, C)


class SpatialAttention(nn.Module):
    """Per-location transfer weights: channel-mean map -> pointwise MLP -> sigmoid -> gnorm over H*W."""

    def __init__(self, hidden: int = 8):
        super().__init__()
        self.fc1 = nn.Conv2d(1, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, 1, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        s = f.detach().mean(dim=1, keepdim=True)
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return gnorm(s.flatten(1), dim=1)  # (B, H*W)


def channel_attention(f: torch.Tensor, module: ChannelAttention) -> torch.Tensor:
    return module(f)


def stl(f_src: torch.Tensor, f_dst: torch.Tensor, attention: ChannelAttention) -> torch.Tensor:
    """Channel-attentive transfer loss; no gradient reaches ``f_src``."""
    _check_same(f_src, f_dst, "stl")
    w = attention(f_src)
    a = l2norm_plane(f_src.detach())
    b = l2norm_plane(f_dst)
    mse = ((a - b) ** 2).mean(dim=(-2, -1))  # (B, C)
    return (w * mse).sum(dim=1).mean()


def gtl(f_src: torch.Tensor, f_dst: torch.Tensor, attention: SpatialAttention) -> torch.Tensor:
    """Spatially attentive transfer loss; no gradient reaches ``f_src``."""
    _check_same(f_src, f_dst, "gtl")
    w = attention(f_src)
    a = l2norm_channel(f_src.detach())
    b = l2norm_channel(f_dst)
    mse = ((a - b) ** 2).mean(dim=1).flatten(1)  # (B, H*W)
    return (w * mse).sum(dim=1).mean()


def sal(f_proj: torch.Tensor, s_d: torch.Tensor, weights: TransferWeights, attention: ChannelAttention) -> torch.Tensor:
    """Embedding-alignment loss ``w1 * MSE + w2 * STL`` for projected stage-4 depth features.

    The MSE term carries the gradient into the depth encoder; the STL term,
    whose source side is detached and whose target is the fixed embedding,
    only trains ``attention``.
    """
    _check_same(f_proj, s_d, "sal")
    return weights.w1 * F.mse_loss(f_proj, s_d) + weights.w2 * stl(f_proj, s_d, attention)


class TransferCriterion(nn.Module):
    """Holds the attention heads of the encoder pre-training objective.

    One channel-attention head for the embedding term, and one head per
    stage and direction for the encoder-to-encoder terms.
    """

    def __init__(self, stage_channels: Sequence[int], embed_channels: int = 256, reduction: int = 4,
                 spatial_hidden: int = 8):
        super().__init__()
        self.sal_attention = ChannelAttention(embed_channels, reduction)
        self.stl_d2t = nn.ModuleDict({str(i): ChannelAttention(stage_channels[i - 1], reduction) for i in STL_STAGES})
        self.stl_t2d = nn.ModuleDict({str(i): ChannelAttention(stage_channels[i - 1], reduction) for i in STL_STAGES})
        self.gtl_d2t = nn.ModuleDict({str(i): SpatialAttention(spatial_hidden) for i in GTL_STAGES})
        self.gtl_t2d = nn.ModuleDict({str(i): SpatialAttention(spatial_hidden) for i in GTL_STAGES})

    def terms(self, pyr_d, pyr_t, f_proj, s_d, weights: TransferWeights) -> Dict[str, torch.Tensor]:
        """Individual (unweighted) terms, keyed by name, plus the weighted ``total``."""
        out = {"sal": sal(f_proj, s_d, weights, self.sal_attention)}
        for i in GTL_STAGES:
            out[f"gtl_d2t_{i}"] = gtl(pyr_d[i - 1], pyr_t[i - 1], self.gtl_d2t[str(i)])
            out[f"gtl_t2d_{i}"] = gtl(pyr_t[i - 1], pyr_d[i - 1], self.gtl_t2d[str(i)])
        for i in STL_STAGES:
            out[f"stl_d2t_{i}"] = stl(pyr_d[i - 1], pyr_t[i - 1], self.stl_d2t[str(i)])
            out[f"stl_t2d_{i}"] = stl(pyr_t[i - 1], pyr_d[i - 1], self.stl_t2d[str(i)])
        d2t = sum(v for k, v in out.items() if "_d2t_" in k)
        t2d = sum(v for k, v in out.items() if "_t2d_" in k)
        out["total"] = out["sal"] + weights.w3 * d2t + weights.w4 * t2d
        return out

    def forward(self, pyr_d, pyr_t, f_proj, s_d, weights: TransferWeights) -> torch.Tensor:
        return self.terms(pyr_d, pyr_t, f_proj, s_d, weights)["total"]


def samaep_loss(pyr_d, pyr_t, f_proj, s_d, weights: TransferWeights, criterion: TransferCriterion) -> torch.Tensor:
    """Pre-training objective: embedding term plus weighted encoder-to-encoder transfer.

    Channel-attentive terms cover stages 3-5 and spatial ones stages 1-3.
    """
    return criterion(pyr_d, pyr_t, f_proj, s_d, weights)


def extract_boundary(m: torch.Tensor) -> torch.Tensor:
    """Morphological gradient (3x3 max-pool minus 3x3 min-pool) of ``(B, 1, H, W)`` maps."""
    squeeze = m.ndim == 2
    x = m[None, None] if squeeze else m
    dil = F.max_pool2d(x, 3, stride=1, padding=1)
    ero = -F.max_pool2d(-x, 3, stride=1, padding=1)
    out = dil - ero
    return out[0, 0] if squeeze else out


def iou_loss(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    inter = (p * g).flatten(1).sum(1)
    union = p.flatten(1).sum(1) + g.flatten(1).sum(1) - inter
    return (1.0 - (inter + IOU_SMOOTH) / (union + IOU_SMOOTH)).mean()


def bce_loss(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(g * torch.log(p) + (1.0 - g) * torch.log(1.0 - p)).mean()


def ioubce(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    _check_same(p, g, "ioubce")
    if p.ndim < 2:
        raise DomainError("ioubce needs at least 2-D maps")
    if p.ndim == 2:
        p, g = p[None], g[None]
    return iou_loss(p, g) + bce_loss(p, g)


def sod_loss(outs, gt: torch.Tensor, terms: Iterable[str] = ("o", "o1", "o2")) -> torch.Tensor:
    """Region + boundary IoU/BCE summed over the final map and two deep-supervision maps.

    Coarse predictions are bilinearly upsampled to the ground-truth size.
    """
    gt_b = extract_boundary(gt)
    total = gt.new_zeros(())
    for name in terms:
        p = getattr(outs, name)
        if p.shape[-2:] != gt.shape[-2:]:
            p = F.interpolate(p, size=gt.shape[-2:], mode="bilinear", align_corners=False)
        total = total + ioubce(p, gt) + ioubce(extract_boundary(p), gt_b)
    return total
