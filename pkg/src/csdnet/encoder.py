"""Inverted-residual (MobileNet-V2 style) encoder with five feature taps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torchvision.models import mobilenet_v2

from .cfar import apply_prescreen_gate
from .errors import DomainError, NumericError, WeightLoadError

log = logging.getLogger(__name__)

# features[a:b] slices ending at each stride-2 stage of the backbone
_STAGE_SLICES = ((0, 2), (2, 4), (4, 7), (7, 14), (14, 18))
_BASE_CHANNELS = (16, 24, 32, 96, 320)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _make_divisible(v: float, divisor: int = 8) -> int:
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


def stage_channels_for(width_multiplier: float) -> Tuple[int, ...]:
    return tuple(_make_divisible(c * width_multiplier) for c in _BASE_CHANNELS)


@dataclass
class EncoderConfig:
    width_multiplier: float = 1.0
    input_size: Tuple[int, int] = (256, 256)
    input_replicate: bool = True
    weights_path: Optional[str] = None
    stage_channels: Tuple[int, ...] = field(init=False)

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        if not 0 < self.width_multiplier <= 1:
            raise DomainError(f"width_multiplier must be in (0, 1], got {self.width_multiplier}")
        if len(self.input_size) != 2 or any(s <= 0 or s % 32 for s in self.input_size):
            raise DomainError(f"input_size must be two positive multiples of 32, got {self.input_size}")
        self.stage_channels = stage_channels_for(self.width_multiplier)

    def to_dict(self) -> dict:
        return {
            "width_multiplier": self.width_multiplier,
            "input_size": list(self.input_size),
            "input_replicate": self.input_replicate,
            "weights_path": self.weights_path,
        }


class FeaturePyramid(list):
    """Five feature maps ``[F_1, ..., F_5]``; ``F_i`` sits at 1/2**i resolution."""

    def __init__(self, stages: Sequence[torch.Tensor]):
        stages = list(stages)
        if len(stages) != 5:
            raise DomainError(f"a pyramid has exactly 5 stages, got {len(stages)}")
        super().__init__(stages)

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [tuple(f.shape) for f in self]


class Encoder(nn.Module):
    """One modality stream.

    Single-channel inputs in [0, 1] are replicated to three channels and
    normalized with ImageNet statistics, so weights converted from a
    torchvision ImageNet checkpoint load directly (parameter names follow
    torchvision's ``features.N`` layout).
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        backbone = mobilenet_v2(weights=None, width_mult=cfg.width_multiplier)
        # drop the final 1x1 expansion to 1280 channels: no tap uses it
        self.features = nn.Sequential(*list(backbone.features.children())[:18])
        self.register_buffer("pixel_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    @property
    def stage_channels(self) -> Tuple[int, ...]:
        return self.cfg.stage_channels

    def preprocess(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim == 3:
            image = image[:, None]
        if image.ndim != 4:
            raise DomainError(f"expected (B, C, H, W) input, got shape {tuple(image.shape)}")
        if tuple(image.shape[-2:]) != self.cfg.input_size:
            raise DomainError(
                f"input spatial size {tuple(image.shape[-2:])} != configured {self.cfg.input_size}"
            )
        if image.shape[1] == 1 and self.cfg.input_replicate:
            image = image.expand(-1, 3, -1, -1)
        if image.shape[1] != 3:
            raise DomainError(f"expected 1 or 3 input channels, got {image.shape[1]}")
        return (image - self.pixel_mean.to(image.dtype)) / self.pixel_std.to(image.dtype)

    def forward(self, image: torch.Tensor, gate=None) -> FeaturePyramid:
        x = self.preprocess(image)
        stages = []
        for i, (a, b) in enumerate(_STAGE_SLICES):
            x = self.features[a:b](x)
            if i == 0 and gate is not None:
                x = apply_prescreen_gate(x, gate)
            stages.append(x)
        if not all(torch.isfinite(f).all() for f in stages):
            bad = [i + 1 for i, f in enumerate(stages) if not torch.isfinite(f).all()]
            raise NumericError(f"non-finite activations in encoder stages {bad}")
        return FeaturePyramid(stages)


def encode(image: torch.Tensor, encoder: Encoder, gate=None) -> FeaturePyramid:
    return encoder(image, gate)


def count_parameters(model: nn.Module) -> int:
    """Number of trainable scalars."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameter_breakdown(model: nn.Module) -> dict:
    """Trainable-parameter counts per direct child module plus ``"total"``."""
    out = {name: count_parameters(child) for name, child in model.named_children()}
    out["total"] = count_parameters(model)
    return out


def save_weights(module: nn.Module, path) -> Path:
    """Write a module's state as a ``.npz`` archive of little-endian float32 arrays."""
    path = Path(path)
    arrays = {k: v.detach().cpu().numpy().astype("<f4") for k, v in module.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_backbone_weights(model: nn.Module, path) -> nn.Module:
    """Load a weight archive into ``model``, in place.

    Names present in the archive but not in the model (and the reverse) are
    logged and skipped.  Any shared name whose shape differs aborts the load
    before anything is copied.

    Raises:
        FileNotFoundError: ``path`` does not exist.
        WeightLoadError: shape mismatch; ``err.mismatched`` lists the names.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weight file not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        arrays = {k: archive[k] for k in archive.files}

    state = model.state_dict()
    mismatched = [
        f"{k}: file {tuple(arrays[k].shape)} vs model {tuple(state[k].shape)}"
        for k in sorted(arrays)
        if k in state and tuple(arrays[k].shape) != tuple(state[k].shape)
    ]
    if mismatched:
        raise WeightLoadError(
            f"{len(mismatched)} tensor(s) in {path} do not fit the model:\n  " + "\n  ".join(mismatched),
            mismatched=[m.split(":")[0] for m in mismatched],
        )
    unexpected = sorted(set(arrays) - set(state))
    missing = sorted(set(state) - set(arrays))
    if unexpected:
        log.warning("ignored %d tensor(s) not in model: %s", len(unexpected), ", ".join(unexpected))
    if missing:
        log.warning("%d model tensor(s) absent from %s: %s", len(missing), path, ", ".join(missing))

    with torch.no_grad():
        for k in sorted(set(arrays) & set(state)):
            state[k].copy_(torch.from_numpy(np.array(arrays[k])).reshape(state[k].shape).to(state[k].dtype))
    return model
