"""Joint encoder-decoder training, inference and cost accounting."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .data import Sample, batch_order
from .encoder import count_parameters, parameter_breakdown
from .errors import NumericError
from .losses import sod_loss
from .metrics import mae
from .model import CSDNet

log = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    eval_every: int = 10
    hflip: bool = False

    def problems(self) -> List[str]:
        out = []
        if not self.learning_rate > 0:
            out.append(f"optim.learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            out.append(f"optim.batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            out.append(f"optim.epochs must be >= 1, got {self.epochs}")
        if self.eval_every < 1:
            out.append(f"optim.eval_every must be >= 1, got {self.eval_every}")
        return out


def stack_samples(samples: Sequence[Sample]):
    """``(depth, thermal, gt)`` float32 tensors of shape ``(N, 1, H, W)``."""
    as_t = lambda xs: torch.from_numpy(np.stack(xs).astype(np.float32))[:, None]
    return (as_t([s.depth for s in samples]), as_t([s.thermal for s in samples]),
            as_t([s.gt for s in samples]))


@dataclass
class TrainResult:
    step_losses: List[float] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    eval_trace: List[dict] = field(default_factory=list)
    best_mae: float = float("inf")
    best_state: Optional[Dict[str, torch.Tensor]] = None
    best_epoch: int = -1


class Trainer:
    """Adam on the deep-supervised SOD loss over a fixed in-memory sample set.

    CFAR masks are computed once per sample (and per flip) up front.
    """

    def __init__(self, model: CSDNet, samples: Sequence[Sample], cfg: OptimConfig,
                 holdout: Sequence[Sample] = ()):
        self.model = model
        self.cfg = cfg
        self.samples = list(samples)
        self.holdout = list(holdout)
        self.depth, self.thermal, self.gt = stack_samples(self.samples)
        self.masks = model.prescreen(self.depth, self.thermal) if model.cfg.use_cfar else None
        self.optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad],
                                          lr=cfg.learning_rate)

    def _batch(self, idx, epoch):
        idx = torch.as_tensor(idx)
        d, t, g = self.depth[idx], self.thermal[idx], self.gt[idx]
        masks = None if self.masks is None else (self.masks[0][idx], self.masks[1][idx])
        if self.cfg.hflip:
            flip = torch.from_numpy(np.random.default_rng([self.cfg.seed, epoch, 7]).random(len(idx)) < 0.5)
            fl = lambda x: torch.where(flip[:, None, None, None], x.flip(-1), x)
            d, t, g = fl(d), fl(t), fl(g)
            if masks is not None:
                masks = (fl(masks[0]), fl(masks[1]))
        return d, t, g, masks

    def train_step(self, idx, epoch: int) -> float:
        self.model.train()
        d, t, g, masks = self._batch(idx, epoch)
        outs = self.model(d, t, masks)
        loss = sod_loss(outs, g)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite SOD loss at epoch {epoch}")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return loss.item()

    def run(self, epochs: Optional[int] = None, start_epoch: int = 0,
            on_epoch_end: Optional[Callable[[int, "Trainer", TrainResult], None]] = None) -> TrainResult:
        res = TrainResult()
        end = self.cfg.epochs if epochs is None else epochs
        for epoch in range(start_epoch, end):
            losses = [self.train_step(idx, epoch)
                      for idx in batch_order(len(self.samples), self.cfg.batch_size, self.cfg.seed, epoch)]
            res.step_losses.extend(losses)
            res.epoch_losses.append(float(np.mean(losses)))
            if self.holdout and ((epoch + 1) % self.cfg.eval_every == 0 or epoch + 1 == end):
                score = float(np.mean([mae(p, s.gt) for p, s in zip(predict(self.model, self.holdout), self.holdout)]))
                res.eval_trace.append({"epoch": epoch, "mae": score})
                log.info("epoch %d: loss %.5f, holdout MAE %.5f", epoch, res.epoch_losses[-1], score)
                if score < res.best_mae:
                    res.best_mae, res.best_epoch = score, epoch
                    res.best_state = copy.deepcopy(self.model.state_dict())
            if on_epoch_end is not None:
                on_epoch_end(epoch, self, res)
        return res


@torch.no_grad()
def predict(model: CSDNet, samples: Sequence[Sample], batch_size: int = 8, with_masks: bool = False):
    """Final saliency maps (``(H, W)`` float arrays) in eval mode."""
    model.eval()
    preds, all_masks = [], []
    for i in range(0, len(samples), batch_size):
        d, t, _ = stack_samples(samples[i:i + batch_size])
        masks = model.prescreen(d, t) if model.cfg.use_cfar else None
        out = model(d, t, masks)
        preds.extend(out.o[:, 0].numpy().astype(np.float64))
        if with_masks and masks is not None:
            all_masks.extend(zip(masks[0][:, 0].numpy(), masks[1][:, 0].numpy()))
    return (preds, all_masks) if with_masks else preds


def count_flops(model: nn.Module, *inputs) -> int:
    """Floating-point operations of one forward pass: 2 x multiply-accumulates
    of convolution and linear layers only, per batch element."""
    macs = []

    def conv_hook(m, inp, out):
        k = (m.in_channels // m.groups) * int(np.prod(m.kernel_size))
        macs.append(out.numel() // out.shape[0] * k)

    def linear_hook(m, inp, out):
        macs.append(out.numel() // out.shape[0] * m.in_features)

    hooks = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(linear_hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(*inputs)
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    return 2 * int(sum(macs))


def cost_report(model: CSDNet, n_timed: int = 50, warmup: int = 3) -> dict:
    """Parameter count, FLOPs and per-image latency at the configured input size."""
    h, w = model.cfg.encoder.input_size
    g = torch.Generator().manual_seed(0)
    d = torch.rand(1, 1, h, w, generator=g)
    t = torch.rand(1, 1, h, w, generator=g)
    flops = count_flops(model, d, t)
    model.eval()
    times = []
    with torch.no_grad():
        for k in range(warmup + n_timed):
            t0 = time.perf_counter()
            model(d, t)
            if k >= warmup:
                times.append(time.perf_counter() - t0)
    return {
        "params": count_parameters(model),
        "params_by_module": parameter_breakdown(model),
        "flops": flops,
        "input_size": [h, w],
        "latency_ms_median": 1e3 * float(np.median(times)),
        "latency_ms_mean": 1e3 * float(np.mean(times)),
        "n_timed": n_timed,
        "flop_convention": "2 x MAC, Conv2d and Linear layers only",
    }
