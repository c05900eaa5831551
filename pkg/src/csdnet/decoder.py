"""U-shaped top-down decoder with deep-supervision heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import FeaturePyramid
from .errors import DomainError

# stage 5 -> stage 1 at width 1.0
DEFAULT_DECODER_WIDTHS = (256, 128, 64, 48, 32)


def decoder_widths_for(width_multiplier: float, base: Sequence[int] = DEFAULT_DECODER_WIDTHS) -> Tuple[int, ...]:
    return tuple(max(4, int(round(c * width_multiplier))) for c in base)


class SkipFusion(nn.Module):
    """1x1 projection of the elementwise sum of the two modality features."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, f_d: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
        if f_d.shape != f_t.shape:
            raise DomainError(f"skip features differ in shape: {tuple(f_d.shape)} vs {tuple(f_t.shape)}")
        return self.proj(f_d + f_t)


def fuse_skip(f_d: torch.Tensor, f_t: torch.Tensor, module: SkipFusion) -> torch.Tensor:
    return module(f_d, f_t)


class DecoderBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        return F.gelu(self.bn(self.conv(x)))


@dataclass
class DecoderOutputs:
    """Post-sigmoid saliency maps; ``o1`` .. ``o4`` sit at 1/2 .. 1/16 resolution."""

    o: torch.Tensor
    o1: torch.Tensor
    o2: torch.Tensor
    o3: torch.Tensor
    o4: torch.Tensor

    def as_tuple(self):
        return (self.o, self.o1, self.o2, self.o3, self.o4)


class Decoder(nn.Module):
    def __init__(self, stage_channels: Sequence[int], widths: Sequence[int] = DEFAULT_DECODER_WIDTHS):
        super().__init__()
        if len(stage_channels) != 5 or len(widths) != 5:
            raise DomainError("decoder needs five encoder stage widths and five decoder widths")
        self.widths = tuple(int(w) for w in widths)  # stage 5 .. stage 1
        enc = list(reversed(list(stage_channels)))  # stage 5 .. stage 1
        self.skips = nn.ModuleList(SkipFusion(c, w) for c, w in zip(enc, self.widths))
        blocks = [DecoderBlock(self.widths[0], self.widths[0])]
        for k in range(1, 5):
            blocks.append(DecoderBlock(self.widths[k - 1] + self.widths[k], self.widths[k]))
        self.blocks = nn.ModuleList(blocks)
        # heads for stages 4, 3, 2, 1 (index k = 1..4)
        self.heads = nn.ModuleList(nn.Conv2d(w, 1, 1) for w in self.widths[1:])
        self.final = nn.Conv2d(self.widths[-1], 1, 3, padding=1)

    @property
    def stage4_channels(self) -> int:
        return self.widths[1]

    def forward(
        self,
        pyr_d: FeaturePyramid,
        pyr_t: FeaturePyramid,
        ican_out: Optional[torch.Tensor] = None,
        output_size: Optional[Tuple[int, int]] = None,
    ) -> DecoderOutputs:
        d5 = list(reversed(list(pyr_d)))
        t5 = list(reversed(list(pyr_t)))
        x = self.blocks[0](self.skips[0](d5[0], t5[0]))
        maps = []
        for k in range(1, 5):
            skip = self.skips[k](d5[k], t5[k])
            up = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = self.blocks[k](torch.cat([up, skip], dim=1))
            if k == 1 and ican_out is not None:
                if ican_out.shape != x.shape:
                    raise DomainError(f"ICAN output {tuple(ican_out.shape)} != stage-4 tensor {tuple(x.shape)}")
                x = x + ican_out
            maps.append(torch.sigmoid(self.heads[k - 1](x)))
        if output_size is None:
            output_size = tuple(2 * s for s in x.shape[-2:])
        full = F.interpolate(x, size=output_size, mode="bilinear", align_corners=False)
        o = torch.sigmoid(self.final(full))
        o4, o3, o2, o1 = maps
        return DecoderOutputs(o=o, o1=o1, o2=o2, o3=o3, o4=o4)

    def stage4_shape(self, pyr_d: FeaturePyramid) -> Tuple[int, ...]:
        f4 = pyr_d[3]
        return (f4.shape[0], self.stage4_channels, f4.shape[-2], f4.shape[-1])


def decode(pyr_d, pyr_t, ican_out, decoder: Decoder) -> DecoderOutputs:
    return decoder(pyr_d, pyr_t, ican_out)
