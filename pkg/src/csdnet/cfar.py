"""Cell-averaging CFAR prescreening for single-channel depth / thermal maps.

The background around every cell is modelled as Gaussian and estimated from
a square annulus of training cells (guard square excluded).  A cell is
declared a target when it leaves the band ``mean +/- std * threshold_scale``
on the configured side.  The masks produced here are crossed between the two
encoder streams by :func:`apply_prescreen_gate`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import special

from .errors import DegenerateWindowError, DomainError


class Polarity(str, enum.Enum):
    HIGH = "high"
    LOW = "low"


class BorderPolicy(str, enum.Enum):
    REFLECT = "reflect"
    SHRINK = "shrink"


@dataclass(frozen=True)
class CfarConfig:
    """Window geometry and sensitivity of the detector.

    Attributes:
        window_radius: Half-width of the square training window.
        guard_radius: Half-width of the guard square around the cell under
            test; guard cells (and the cell itself) never enter the estimate.
        threshold_scale: Number of background standard deviations a cell
            must exceed the background mean by.
        polarity: ``"high"`` detects bright cells, ``"low"`` dark ones.
        border_policy: ``"reflect"`` mirrors the image at its borders so every
            cell sees the same number of training cells; ``"shrink"`` uses
            only in-bounds training cells.
    """

    window_radius: int = 8
    guard_radius: int = 2
    threshold_scale: float = 3.0
    polarity: Polarity = Polarity.HIGH
    border_policy: BorderPolicy = BorderPolicy.REFLECT

    def __post_init__(self):
        object.__setattr__(self, "polarity", Polarity(self.polarity))
        object.__setattr__(self, "border_policy", BorderPolicy(self.border_policy))
        if not 0 <= self.guard_radius < self.window_radius:
            raise DomainError(
                f"need 0 <= guard_radius < window_radius, got "
                f"guard_radius={self.guard_radius}, window_radius={self.window_radius}"
            )
        if not (math.isfinite(self.threshold_scale) and self.threshold_scale > 0):
            raise DomainError(f"threshold_scale must be finite and > 0, got {self.threshold_scale}")

    @property
    def n_training_cells(self) -> int:
        """Training-cell count for an interior cell."""
        return (2 * self.window_radius + 1) ** 2 - (2 * self.guard_radius + 1) ** 2

    @property
    def pfa(self) -> float:
        return pfa_from_threshold(self.threshold_scale)

    def to_dict(self) -> dict:
        return {
            "window_radius": self.window_radius,
            "guard_radius": self.guard_radius,
            "threshold_scale": self.threshold_scale,
            "polarity": self.polarity.value,
            "border_policy": self.border_policy.value,
        }


@dataclass(frozen=True)
class BackgroundStats:
    mean: float
    std: float
    count: int


def pfa_from_threshold(threshold_scale: float) -> float:
    """Gaussian upper-tail probability Q(T) of a standardized threshold."""
    return float(special.ndtr(-float(threshold_scale)))


def threshold_from_pfa(pfa: float) -> float:
    """Inverse of :func:`pfa_from_threshold`.

    Raises:
        DomainError: if ``pfa`` is not strictly inside (0, 1).
    """
    if not 0.0 < pfa < 1.0:
        raise DomainError(f"pfa must lie in (0, 1), got {pfa}")
    return float(-special.ndtri(float(pfa)))


def finite_sample_pfa(threshold_scale: float, n_training_cells: int) -> float:
    """Exact false-alarm rate on i.i.d. Gaussian noise for a finite window.

    With mean and (population) standard deviation estimated from ``n``
    independent training cells, ``(Y - mean) / std`` scaled by
    ``sqrt((n - 1) / (n + 1))`` follows Student's t with ``n - 1`` degrees of
    freedom.  Tends to :func:`pfa_from_threshold` as ``n`` grows.
    """
    n = int(n_training_cells)
    if n < 2:
        raise DomainError(f"need at least two training cells, got {n}")
    from scipy import stats

    t = float(threshold_scale) * math.sqrt((n - 1) / (n + 1))
    return float(stats.t.sf(t, n - 1))


def annulus_offsets(cfg: CfarConfig) -> list[Tuple[int, int]]:
    """Training-cell offsets in row-major order."""
    r, g = cfg.window_radius, cfg.guard_radius
    return [
        (dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if max(abs(dy), abs(dx)) > g
    ]


def _as_map(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise DomainError(f"expected a 2-D map, got shape {arr.shape}")
    return arr


def _padded(image: np.ndarray, cfg: CfarConfig):
    r = cfg.window_radius
    if cfg.border_policy is BorderPolicy.REFLECT:
        return np.pad(image, r, mode="reflect"), None
    valid = np.pad(np.ones(image.shape, dtype=np.float64), r)
    return np.pad(image, r), valid


def background_maps(image, cfg: CfarConfig):
    """Per-cell background mean, standard deviation and training-cell count.

    Accumulates shifted copies of the padded image offset by offset (two
    passes: mean, then squared deviations), so the result matches a plain
    per-pixel loop that visits the training cells in row-major order.
    """
    img = _as_map(image)
    h, w = img.shape
    r = cfg.window_radius
    padded, valid = _padded(img, cfg)
    offsets = annulus_offsets(cfg)

    def window(arr, dy, dx):
        return arr[r + dy:r + dy + h, r + dx:r + dx + w]

    total = np.zeros_like(img)
    if valid is None:
        count = np.full(img.shape, float(len(offsets)))
        for dy, dx in offsets:
            total += window(padded, dy, dx)
    else:
        count = np.zeros_like(img)
        for dy, dx in offsets:
            total += window(padded, dy, dx)
            count += window(valid, dy, dx)

    with np.errstate(invalid="ignore", divide="ignore"):
        mean = total / count

    sq = np.zeros_like(img)
    for dy, dx in offsets:
        d = window(padded, dy, dx) - mean
        if valid is not None:
            d = d * window(valid, dy, dx)
        sq += d * d
    with np.errstate(invalid="ignore", divide="ignore"):
        std = np.sqrt(sq / count)
    return mean, std, count.astype(np.int64)


def local_background_stats(image, center: Tuple[int, int], cfg: CfarConfig) -> BackgroundStats:
    """Background statistics of the training annulus around one cell.

    Raises:
        DomainError: ``center`` outside the image.
        DegenerateWindowError: no training cell falls inside the image
            under the ``shrink`` policy.
    """
    img = _as_map(image)
    h, w = img.shape
    cy, cx = (int(c) for c in center)
    if not (0 <= cy < h and 0 <= cx < w):
        raise DomainError(f"center {center} outside image of shape {img.shape}")
    r = cfg.window_radius
    padded, valid = _padded(img, cfg)

    values = []
    for dy, dx in annulus_offsets(cfg):
        if valid is None or valid[r + cy + dy, r + cx + dx]:
            values.append(padded[r + cy + dy, r + cx + dx])
    if not values:
        raise DegenerateWindowError(
            f"no training cells inside a {h}x{w} image around {center} "
            f"(window_radius={cfg.window_radius}, guard_radius={cfg.guard_radius})"
        )
    total = 0.0
    for v in values:
        total += v
    mean = total / len(values)
    sq = 0.0
    for v in values:
        sq += (v - mean) * (v - mean)
    return BackgroundStats(mean=float(mean), std=float(math.sqrt(sq / len(values))), count=len(values))


def cfar_detect(image, cfg: CfarConfig) -> np.ndarray:
    """Binary CFAR mask (``uint8`` 0/1) with the same shape as ``image``.

    A flat neighbourhood has zero spread, so the strict inequality never
    fires there.  Cells without any training cell (tiny images under the
    ``shrink`` policy) are never detected.
    """
    img = _as_map(image)
    mean, std, count = background_maps(img, cfg)
    band = std * cfg.threshold_scale
    with np.errstate(invalid="ignore"):
        if cfg.polarity is Polarity.HIGH:
            hit = img > mean + band
        else:
            hit = img < mean - band
    hit &= count > 0
    return hit.astype(np.uint8)


def cross_prescreen(depth, thermal, cfg_d: CfarConfig, cfg_t: CfarConfig):
    """Masks for both modalities; each is meant for the *other* stream.

    Returns:
        ``(mask_d, mask_t)``: ``mask_d`` gates the thermal encoder and
        ``mask_t`` gates the depth encoder.
    """
    d = _as_map(depth)
    t = _as_map(thermal)
    if d.shape != t.shape:
        raise DomainError(f"depth {d.shape} and thermal {t.shape} differ in shape")
    return cfar_detect(d, cfg_d), cfar_detect(t, cfg_t)


def apply_prescreen_gate(features: torch.Tensor, mask_other) -> torch.Tensor:
    """Residual multiplicative gate ``features * (1 + mask)``.

    ``mask_other`` may be ``(H, W)``, ``(B, H, W)`` or ``(B, 1, H, W)``; it is
    resized to the feature resolution by nearest-neighbour sampling so it
    stays binary.
    """
    mask = torch.as_tensor(np.asarray(mask_other) if not torch.is_tensor(mask_other) else mask_other)
    mask = mask.to(device=features.device, dtype=features.dtype)
    if mask.ndim == 2:
        mask = mask[None, None]
    elif mask.ndim == 3:
        mask = mask[:, None]
    if mask.ndim != 4 or mask.shape[1] != 1:
        raise DomainError(f"cannot interpret mask of shape {tuple(mask.shape)}")
    if mask.shape[-2:] != features.shape[-2:]:
        mask = F.interpolate(mask, size=features.shape[-2:], mode="nearest")
    return features * (1.0 + mask)
