"""Full network: CFAR-gated dual encoder, ICAN fusion and the decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import torch
from torch import nn

from .cfar import CfarConfig, cross_prescreen
from .decoder import DEFAULT_DECODER_WIDTHS, Decoder, DecoderOutputs, decoder_widths_for
from .encoder import Encoder, EncoderConfig, FeaturePyramid
from .ican import ICAN


@dataclass
class ModelConfig:
    """Structural settings, including the three ablation switches.

    ``use_samaep`` is carried here so that a checkpoint records whether the
    depth encoder was warm-started; it has no effect on the architecture.
    """

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_widths: Optional[Tuple[int, ...]] = None
    se_reduction: int = 4
    cfar_depth: CfarConfig = field(default_factory=CfarConfig)
    cfar_thermal: CfarConfig = field(default_factory=CfarConfig)
    use_cfar: bool = True
    use_ican: bool = True
    use_samaep: bool = True

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.cfar_depth, dict):
            self.cfar_depth = CfarConfig(**self.cfar_depth)
        if isinstance(self.cfar_thermal, dict):
            self.cfar_thermal = CfarConfig(**self.cfar_thermal)
        if self.decoder_widths is None:
            self.decoder_widths = decoder_widths_for(self.encoder.width_multiplier, DEFAULT_DECODER_WIDTHS)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "decoder_widths": list(self.decoder_widths),
            "se_reduction": self.se_reduction,
            "cfar_depth": self.cfar_depth.to_dict(),
            "cfar_thermal": self.cfar_thermal.to_dict(),
            "use_cfar": self.use_cfar,
            "use_ican": self.use_ican,
            "use_samaep": self.use_samaep,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = dict(d.pop("encoder", {}))
        enc.pop("stage_channels", None)
        return cls(encoder=EncoderConfig(**enc), **d)


class CSDNet(nn.Module):
    def __init__(self, cfg: ModelConfig = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.depth_encoder = Encoder(cfg.encoder)
        self.thermal_encoder = Encoder(cfg.encoder)
        self.decoder = Decoder(cfg.encoder.stage_channels, cfg.decoder_widths)
        if cfg.use_ican:
            self.ican = ICAN(cfg.encoder.stage_channels[-1], self.decoder.stage4_channels, cfg.se_reduction)
        else:
            self.ican = None

    def prescreen(self, depth: torch.Tensor, thermal: torch.Tensor):
        """CFAR masks for a batch, as ``(B, 1, H, W)`` float tensors."""
        d = depth.detach().cpu().double().numpy().reshape(depth.shape[0], *depth.shape[-2:])
        t = thermal.detach().cpu().double().numpy().reshape(thermal.shape[0], *thermal.shape[-2:])
        md, mt = zip(*(cross_prescreen(a, b, self.cfg.cfar_depth, self.cfg.cfar_thermal) for a, b in zip(d, t)))
        as_t = lambda m: torch.from_numpy(np.stack(m)[:, None]).to(depth.dtype)
        return as_t(md), as_t(mt)

    def encode(self, depth, thermal, masks=None) -> Tuple[FeaturePyramid, FeaturePyramid]:
        gate_d = gate_t = None
        if self.cfg.use_cfar:
            mask_d, mask_t = masks if masks is not None else self.prescreen(depth, thermal)
            # crossing: each stream is gated by the other modality's mask
            gate_d, gate_t = mask_t, mask_d
        return self.depth_encoder(depth, gate_d), self.thermal_encoder(thermal, gate_t)

    def forward(self, depth: torch.Tensor, thermal: torch.Tensor, masks=None) -> DecoderOutputs:
        """Saliency maps for a batch of ``(B, 1, H, W)`` depth/thermal images in [0, 1].

        ``masks`` optionally supplies precomputed ``(mask_d, mask_t)`` from
        :meth:`prescreen`; the detector is deterministic, so caching them
        across epochs changes nothing.
        """
        pyr_d, pyr_t = self.encode(depth, thermal, masks)
        ican_out = None
        if self.ican is not None:
            ican_out = self.ican(pyr_d[4], pyr_t[4], self.decoder.stage4_shape(pyr_d))
        return self.decoder(pyr_d, pyr_t, ican_out, output_size=tuple(depth.shape[-2:]))
