"""Depth-encoder pre-training against precomputed foundation-model embeddings.

Embeddings are read from disk, never computed here.  Each sample's embedding
lives in ``<id>.emb``::

    bytes  0..7   magic  b"CSDEMB\\x00\\x00"
    bytes  8..11  uint32 format version (1)
    bytes 12..15  uint32 reserved (0)
    bytes 16..27  3 x uint32 dims (256, 64, 64)
    bytes 28..    float32 payload, C order

all little-endian.  An index file lists ``<id><TAB><path>`` per line, paths
relative to the index file's directory.  Any tool that can dump a
``[256, 64, 64]`` image embedding can produce these with
:func:`save_sam_embedding`.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Sample, batch_order
from .encoder import Encoder
from .errors import ConfigError, EmbeddingFormatError, EmbeddingIOError, NumericError
from .losses import TransferCriterion, TransferWeights

log = logging.getLogger(__name__)

EMBED_SHAPE = (256, 64, 64)
MAGIC = b"CSDEMB\x00\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sII")
_DIMS = struct.Struct("<III")


@dataclass
class SamEmbedding:
    data: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape != EMBED_SHAPE:
            raise EmbeddingFormatError(f"embedding shape must be {list(EMBED_SHAPE)}, found {list(self.data.shape)}")
        if not np.isfinite(self.data).all():
            raise EmbeddingFormatError(f"embedding {self.source_id!r} contains non-finite values")

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.data).to(dtype)


def save_sam_embedding(path, data) -> Path:
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(data, dtype="<f4"))
    if arr.ndim != 3:
        raise EmbeddingFormatError(f"embedding must be 3-D, got shape {list(arr.shape)}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, 0))
        fh.write(_DIMS.pack(*arr.shape))
        fh.write(arr.tobytes())
    return path


def load_sam_embedding(path) -> SamEmbedding:
    """Read and validate one ``.emb`` file.

    Raises:
        FileNotFoundError: missing file.
        EmbeddingIOError: file shorter than its header or declared payload.
        EmbeddingFormatError: bad magic/version or dims other than [256, 64, 64].
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size + _DIMS.size:
        raise EmbeddingIOError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, _ = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported format version {version}")
    dims = _DIMS.unpack_from(raw, _HEADER.size)
    if dims != EMBED_SHAPE:
        raise EmbeddingFormatError(f"{path}: expected dims {list(EMBED_SHAPE)}, found {list(dims)}")
    offset = _HEADER.size + _DIMS.size
    n = int(np.prod(dims))
    if len(raw) - offset < 4 * n:
        raise EmbeddingIOError(f"{path}: truncated payload ({len(raw) - offset} of {4 * n} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(dims).astype(np.float32)
    return SamEmbedding(data, source_id=str(path))


def write_embedding_index(path, entries: Dict[str, str]) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for sid, p in entries.items():
            fh.write(f"{sid}\t{p}\n")
    return path


def read_embedding_index(path) -> Dict[str, Path]:
    path = Path(path)
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        sid, p = line.split("\t", 1)
        out[sid] = (path.parent / p) if not Path(p).is_absolute() else Path(p)
    return out


def synth_embedding(gt, seed: int) -> SamEmbedding:
    """Deterministic stand-in embedding for a ground-truth mask.

    A random foreground and background channel vector (drawn from ``seed``)
    are mixed by the mask, area-downsampled to 64x64, plus small noise.
    """
    g = torch.as_tensor(np.asarray(gt, dtype=np.float32))[None, None]
    g = F.interpolate(g, size=EMBED_SHAPE[1:], mode="area")[0, 0].numpy().astype(np.float64)
    rng = np.random.default_rng(seed)
    fg = rng.standard_normal(EMBED_SHAPE[0])
    bg = rng.standard_normal(EMBED_SHAPE[0])
    noise = 0.05 * rng.standard_normal(EMBED_SHAPE)
    data = fg[:, None, None] * g + bg[:, None, None] * (1.0 - g) + noise
    return SamEmbedding(data.astype(np.float32), source_id=f"synthetic:{seed}")


class EmbeddingProjection(nn.Module):
    """1x1 conv to the embedding width, then bilinear resize to the embedding grid."""

    def __init__(self, in_channels: int, out_channels: int = EMBED_SHAPE[0], size=EMBED_SHAPE[1:]):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 1)
        self.size = tuple(size)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        # a 1x1 conv commutes with bilinear resizing (weights sum to one), so
        # resize the narrow input rather than the 256-channel output
        return self.conv(F.interpolate(f, size=self.size, mode="bilinear", align_corners=False))


def project_to_embedding(f_d4: torch.Tensor, head: EmbeddingProjection) -> torch.Tensor:
    return head(f_d4)


@dataclass
class PretrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-4
    batch_size: int = 4
    weights: TransferWeights = field(default_factory=TransferWeights)
    embedding_source: str = "synthetic"
    embedding_index: Optional[str] = None
    thermal_frozen: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = TransferWeights(**self.weights)

    def problems(self) -> List[str]:
        out = []
        if self.epochs < 1:
            out.append(f"samaep.epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            out.append(f"samaep.learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            out.append(f"samaep.batch_size must be >= 1, got {self.batch_size}")
        if self.embedding_source not in ("files", "synthetic"):
            out.append(f"samaep.embedding_source must be 'files' or 'synthetic', got {self.embedding_source!r}")
        if self.embedding_source == "files":
            if not self.embedding_index:
                out.append("samaep.embedding_index is required when embedding_source='files'")
            elif not Path(self.embedding_index).is_file():
                out.append(f"samaep.embedding_index not found: {self.embedding_index}")
        return out

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "weights": dict(self.weights.__dict__),
            "embedding_source": self.embedding_source,
            "embedding_index": self.embedding_index,
            "thermal_frozen": self.thermal_frozen,
            "seed": self.seed,
        }


def gather_embeddings(samples: Sequence[Sample], cfg: PretrainConfig) -> List[SamEmbedding]:
    """One embedding per sample from the configured provider (files or synthetic)."""
    if cfg.embedding_source == "files":
        index = read_embedding_index(cfg.embedding_index)
        missing = [s.id for s in samples if s.id not in index]
        if missing:
            raise ConfigError([f"no embedding listed for sample {m!r}" for m in missing])
        return [load_sam_embedding(index[s.id]) for s in samples]
    return [synth_embedding(s.gt, cfg.seed + k) for k, s in enumerate(samples)]


@dataclass
class PretrainResult:
    depth_state: Dict[str, torch.Tensor]
    epoch_losses: List[float]
    step_losses: List[float]


def _first_bad_term(terms: Dict[str, torch.Tensor]) -> str:
    for k, v in terms.items():
        if k != "total" and not torch.isfinite(v).all():
            return k
    return "total"


def pretrain_depth_encoder(
    samples: Sequence[Sample],
    depth_encoder: Encoder,
    thermal_encoder: Encoder,
    cfg: PretrainConfig,
    embeddings: Optional[Sequence[SamEmbedding]] = None,
    max_steps: Optional[int] = None,
) -> PretrainResult:
    """Optimize the pre-training objective with Adam; the depth encoder is updated in place.

    The projection head and attention heads are created here and discarded
    afterwards; only the depth encoder's weights carry forward.  With
    ``thermal_frozen`` the thermal encoder runs in eval mode without
    gradients, so its parameters and buffers are left untouched.

    Raises:
        NumericError: the loss turns non-finite; the message names the first
            offending term.
    """
    problems = cfg.problems()
    if problems:
        raise ConfigError(problems)
    if embeddings is None:
        embeddings = gather_embeddings(samples, cfg)
    torch.manual_seed(cfg.seed)
    head = EmbeddingProjection(depth_encoder.stage_channels[3])
    criterion = TransferCriterion(depth_encoder.stage_channels)

    params = list(depth_encoder.parameters()) + list(head.parameters()) + list(criterion.parameters())
    if cfg.thermal_frozen:
        thermal_encoder.eval()
        for p in thermal_encoder.parameters():
            p.requires_grad_(False)
    else:
        thermal_encoder.train()
        params += list(thermal_encoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    depth_encoder.train()

    depth = torch.stack([torch.from_numpy(s.depth).float()[None] for s in samples])
    thermal = torch.stack([torch.from_numpy(s.thermal).float()[None] for s in samples])
    s_d = torch.stack([e.tensor() for e in embeddings])

    epoch_losses, step_losses = [], []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            running = []
            for idx in batch_order(len(samples), cfg.batch_size, cfg.seed, epoch):
                idx = torch.as_tensor(idx)
                pyr_d = depth_encoder(depth[idx])
                if cfg.thermal_frozen:
                    with torch.no_grad():
                        pyr_t = thermal_encoder(thermal[idx])
                else:
                    pyr_t = thermal_encoder(thermal[idx])
                terms = criterion.terms(pyr_d, pyr_t, head(pyr_d[3]), s_d[idx], cfg.weights)
                loss = terms["total"]
                if not torch.isfinite(loss):
                    raise NumericError(
                        f"non-finite pre-training loss at epoch {epoch}, step {step}: "
                        f"first offending term {_first_bad_term(terms)!r}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                running.append(loss.item())
                step_losses.append(loss.item())
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            epoch_losses.append(float(np.mean(running)))
            log.info("pretrain epoch %d: loss %.6f", epoch, epoch_losses[-1])
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if cfg.thermal_frozen:
            for p in thermal_encoder.parameters():
                p.requires_grad_(True)

    state = {k: v.detach().clone() for k, v in depth_encoder.state_dict().items()}
    return PretrainResult(depth_state=state, epoch_losses=epoch_losses, step_losses=step_losses)
