"""Checkpoints: ``<stem>.npz`` tensor archive plus ``<stem>.json`` metadata sidecar.

Tensors are stored as little-endian float32 arrays keyed ``model/<name>``
and ``optim/<param index>/<state key>``; integer buffers round-trip exactly
below 2**24.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .errors import WeightLoadError

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    config: dict
    epoch: int = 0
    loss_trace: List[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def model_state(self) -> Dict[str, np.ndarray]:
        return {k[len("model/"):]: v for k, v in self.tensors.items() if k.startswith("model/")}


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".npz", ".json") else path


def save_checkpoint(path, model: torch.nn.Module, config: dict, epoch: int = 0,
                    loss_trace=(), optimizer: Optional[torch.optim.Optimizer] = None,
                    extra: Optional[dict] = None) -> Path:
    """Write ``<stem>.npz`` and ``<stem>.json``; returns the ``.npz`` path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"model/{k}": v.detach().cpu().numpy().astype("<f4") for k, v in model.state_dict().items()}
    meta = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "epoch": int(epoch),
        "loss_trace": [float(x) for x in loss_trace],
        "extra": extra or {},
    }
    if optimizer is not None:
        sd = optimizer.state_dict()
        for idx, st in sd["state"].items():
            for key, val in st.items():
                arrays[f"optim/{idx}/{key}"] = np.asarray(
                    val.detach().cpu().numpy() if torch.is_tensor(val) else val).astype("<f4")
        meta["optim_param_groups"] = sd["param_groups"]
    npz = stem.with_suffix(".npz")
    with open(npz, "wb") as fh:
        np.savez(fh, **arrays)
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return npz


def load_checkpoint(path) -> Checkpoint:
    stem = _stem(path)
    npz, js = stem.with_suffix(".npz"), stem.with_suffix(".json")
    for p in (npz, js):
        if not p.is_file():
            raise FileNotFoundError(f"checkpoint file not found: {p}")
    meta = json.loads(js.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise WeightLoadError(f"{js}: unsupported checkpoint format {meta.get('format_version')}")
    with np.load(npz, allow_pickle=False) as archive:
        tensors = {k: archive[k] for k in archive.files}
    extra = dict(meta.get("extra", {}))
    if "optim_param_groups" in meta:
        extra["optim_param_groups"] = meta["optim_param_groups"]
    return Checkpoint(tensors=tensors, config=meta["config"], epoch=meta["epoch"],
                      loss_trace=meta["loss_trace"], extra=extra, format_version=meta["format_version"])


def load_model_state(model: torch.nn.Module, state: Dict[str, np.ndarray], prefix: str = "",
                     strict: bool = True) -> torch.nn.Module:
    """Copy archive arrays into ``model``; names are matched after stripping ``prefix``."""
    own = model.state_dict()
    src = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    bad = [f"{k}: {tuple(src[k].shape)} vs {tuple(own[k].shape)}"
           for k in src if k in own and tuple(src[k].shape) != tuple(own[k].shape)]
    missing = sorted(set(own) - set(src))
    if bad or (strict and missing):
        raise WeightLoadError("checkpoint does not fit model:\n  " + "\n  ".join(bad + [f"{m}: missing" for m in missing]),
                              mismatched=[b.split(":")[0] for b in bad] + missing)
    with torch.no_grad():
        for k, v in src.items():
            if k in own:
                own[k].copy_(torch.from_numpy(np.array(v)).reshape(own[k].shape).to(own[k].dtype))
    return model


def optimizer_state(ckpt: Checkpoint) -> Optional[dict]:
    """Rebuild an optimizer ``state_dict`` saved by :func:`save_checkpoint`, or ``None``."""
    groups = ckpt.extra.get("optim_param_groups")
    if groups is None:
        return None
    state: Dict[int, dict] = {}
    for k, v in ckpt.tensors.items():
        if not k.startswith("optim/"):
            continue
        _, idx, key = k.split("/", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(v)).float()
    return {"state": state, "param_groups": groups}
