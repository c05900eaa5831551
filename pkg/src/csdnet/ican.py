"""Deep-layer fusion: SE reweighting, elementwise soft logic, decoder injection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainError


class SqueezeExcitation(nn.Module):
    """Channel gate: avg-pool -> 1x1 reduce -> ReLU -> 1x1 expand -> sigmoid -> scale."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if reduction < 1:
            raise DomainError(f"reduction must be >= 1, got {reduction}")
        hidden = max(channels // reduction, 1)
        self.reduce = nn.Conv2d(channels, hidden, 1)
        self.expand = nn.Conv2d(hidden, channels, 1)

    def excitation(self, x: torch.Tensor) -> torch.Tensor:
        s = F.adaptive_avg_pool2d(x, 1)
        return torch.sigmoid(self.expand(F.relu(self.reduce(s))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.excitation(x)


def se_reweight(features: torch.Tensor, se: SqueezeExcitation) -> torch.Tensor:
    return se(features)


@dataclass
class SoftLogicResult:
    and_map: torch.Tensor
    or_map: torch.Tensor
    xor_map: torch.Tensor

    @property
    def concatenated(self) -> torch.Tensor:
        """``cat(AND, OR, XOR)`` along the channel axis."""
        return torch.cat([self.and_map, self.or_map, self.xor_map], dim=-3)


def soft_logic(w_d: torch.Tensor, w_t: torch.Tensor) -> SoftLogicResult:
    """Elementwise min / max / absolute difference of two feature maps."""
    if w_d.shape != w_t.shape:
        raise DomainError(f"soft logic needs equal shapes, got {tuple(w_d.shape)} and {tuple(w_t.shape)}")
    return SoftLogicResult(
        and_map=torch.minimum(w_d, w_t),
        or_map=torch.maximum(w_d, w_t),
        xor_map=torch.abs(w_d - w_t),
    )


class ICAN(nn.Module):
    """Fuses the two deepest feature maps into an additive decoder term.

    The logic maps are projected by 1x1 conv -> BN -> GELU and upsampled
    bilinearly to the stage-4 decoder resolution; the caller adds the
    result to its stage-4 tensor.
    """

    def __init__(self, channels: int, out_channels: int, reduction: int = 4):
        super().__init__()
        self.se_d = SqueezeExcitation(channels, reduction)
        self.se_t = SqueezeExcitation(channels, reduction)
        self.proj = nn.Conv2d(3 * channels, out_channels, 1)
        self.bn = nn.BatchNorm2d(out_channels)

    def logic(self, f_d5: torch.Tensor, f_t5: torch.Tensor) -> SoftLogicResult:
        return soft_logic(self.se_d(f_d5), self.se_t(f_t5))

    def inject(self, logic: SoftLogicResult, target_shape: Sequence[int]) -> torch.Tensor:
        """Project ``L_5`` and upsample it to ``target_shape`` (the stage-4 tensor's shape)."""
        l5 = logic.concatenated
        target_shape = tuple(target_shape)
        h, w = l5.shape[-2:]
        if len(target_shape) != 4 or target_shape[-2:] != (2 * h, 2 * w):
            raise DomainError(
                f"stage-4 shape {target_shape} is not a x2 upsample of the logic maps ({h}x{w})"
            )
        if target_shape[0] != l5.shape[0] or target_shape[1] != self.proj.out_channels:
            raise DomainError(
                f"stage-4 shape {target_shape} does not match batch {l5.shape[0]} / "
                f"projection width {self.proj.out_channels}"
            )
        y = F.gelu(self.bn(self.proj(l5)))
        return F.interpolate(y, size=target_shape[-2:], mode="bilinear", align_corners=False)

    def forward(self, f_d5: torch.Tensor, f_t5: torch.Tensor, target_shape: Sequence[int]) -> torch.Tensor:
        return self.inject(self.logic(f_d5, f_t5), target_shape)


def ican_inject(logic: SoftLogicResult, target_shape: Sequence[int], module: ICAN) -> torch.Tensor:
    return module.inject(logic, target_shape)
