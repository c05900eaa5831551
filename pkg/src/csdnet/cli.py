"""``csdnet`` command line: pretrain / train / eval / infer / cfar-preview / report-cost.

Settings come from an optional JSON config file, then ``--set a.b=value``
overrides, then the convenience flags.  Every run writes into its own
timestamped directory and echoes the resolved settings to ``config.resolved``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .cfar import CfarConfig, cfar_detect, threshold_from_pfa
from .checkpoint import load_checkpoint, load_model_state, optimizer_state, save_checkpoint
from .data import (DatasetLayout, Sample, _read_gray, list_sample_ids, load_vdt_sample, make_split,
                   read_split, synthetic_dataset, write_png)
from .errors import ConfigError, CSDNetError, DataError, DomainError, NumericError
from .metrics import evaluate
from .model import CSDNet, ModelConfig
from .samaep import PretrainConfig, pretrain_depth_encoder
from .training import OptimConfig, Trainer, cost_report, predict

log = logging.getLogger("csdnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "model": {**ModelConfig().to_dict(), "decoder_widths": None},
    "samaep": {"enabled": True, **PretrainConfig().to_dict()},
    "optim": OptimConfig().__dict__,
    "data": {
        "root": None,
        "layout": {"depth_dir": "D", "thermal_dir": "T", "gt_dir": "GT", "suffix": ".png", "invert_depth": True},
        "synthetic": {"n": 16, "seed": 0, "n_objects": 3},
        "train_fraction": 0.75,
        "split_seed": 0,
        "train_split": None,
        "test_split": None,
    },
    "output_dir": "runs",
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass
class RunConfig:
    """Resolved settings for one command; built from nested dicts."""

    raw: dict
    model: ModelConfig = field(init=False)
    samaep: PretrainConfig = field(init=False)
    samaep_enabled: bool = field(init=False)
    optim: OptimConfig = field(init=False)

    def __post_init__(self):
        problems = []
        try:
            self.model = ModelConfig.from_dict(self.raw["model"])
        except (DomainError, TypeError, ValueError) as exc:
            problems.append(f"model: {exc}")
        sam = dict(self.raw["samaep"])
        self.samaep_enabled = bool(sam.pop("enabled", True))
        try:
            self.samaep = PretrainConfig(**sam)
            if self.samaep_enabled:
                problems += self.samaep.problems()
        except (DomainError, TypeError) as exc:
            problems.append(f"samaep: {exc}")
        try:
            self.optim = OptimConfig(**self.raw["optim"])
            problems += self.optim.problems()
        except TypeError as exc:
            problems.append(f"optim: {exc}")
        data = self.raw["data"]
        if data.get("root") is not None and not Path(data["root"]).is_dir():
            problems.append(f"data.root not found: {data['root']}")
        for key in ("train_split", "test_split"):
            if data.get(key) is not None and not Path(data[key]).is_file():
                problems.append(f"data.{key} not found: {data[key]}")
        if not 0.0 <= float(data.get("train_fraction", 0.75)) <= 1.0:
            problems.append(f"data.train_fraction must be in [0, 1], got {data['train_fraction']}")
        if problems:
            raise ConfigError(problems)
        if hasattr(self, "model"):
            self.model.use_samaep = self.samaep_enabled

    @property
    def seed(self) -> int:
        return int(self.optim.seed)

    def resolved(self) -> dict:
        out = copy.deepcopy(self.raw)
        out["model"] = self.model.to_dict()
        return out


def build_config(args) -> RunConfig:
    raw = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = _merge(raw, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(raw, k.strip(), _parse_value(v))
    flag_map = {
        "seed": "optim.seed", "epochs": "optim.epochs", "lr": "optim.learning_rate",
        "batch_size": "optim.batch_size", "width": "model.encoder.width_multiplier",
        "data_root": "data.root", "synthetic": "data.synthetic.n", "output_dir": "output_dir",
        "pretrain_epochs": "samaep.epochs", "embedding_index": "samaep.embedding_index",
    }
    for attr, dotted in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            _set_path(raw, dotted, v)
    if getattr(args, "input_size", None) is not None:
        _set_path(raw, "model.encoder.input_size", [args.input_size, args.input_size])
    if getattr(args, "embedding_index", None) is not None:
        _set_path(raw, "samaep.embedding_source", "files")
    if getattr(args, "no_cfar", False):
        _set_path(raw, "model.use_cfar", False)
    if getattr(args, "no_ican", False):
        _set_path(raw, "model.use_ican", False)
    if getattr(args, "no_samaep", False):
        _set_path(raw, "samaep.enabled", False)
    if raw["samaep"].get("seed") is None:
        raw["samaep"]["seed"] = raw["optim"]["seed"]
    return RunConfig(raw)


def make_run_dir(cfg: RunConfig, command: str, run_dir: Optional[str]) -> Path:
    if run_dir:
        out = Path(run_dir)
    else:
        out = Path(cfg.raw["output_dir"]) / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(json.dumps(cfg.resolved(), indent=2))
    return out


def load_samples(cfg: RunConfig):
    """``(train, test)`` samples from the dataset root or the synthetic generator."""
    data = cfg.raw["data"]
    size = tuple(cfg.model.encoder.input_size)
    if data.get("root"):
        layout = DatasetLayout(**data.get("layout", {}))
        if data.get("train_split") or data.get("test_split"):
            train_ids = read_split(data["train_split"]) if data.get("train_split") else []
            test_ids = read_split(data["test_split"]) if data.get("test_split") else []
        else:
            ids = list_sample_ids(data["root"], layout)
            if not ids:
                raise DataError(f"no samples under {data['root']}")
            train_ids, test_ids = make_split(ids, float(data["train_fraction"]), int(data["split_seed"]))
        load = lambda ids: [load_vdt_sample(data["root"], i, size, layout) for i in ids]
        return load(train_ids), load(test_ids)
    syn = data["synthetic"]
    samples = synthetic_dataset(int(syn["n"]), seed=int(syn.get("seed", 0)), canvas=size,
                                n_objects=int(syn.get("n_objects", 3)))
    train_ids, test_ids = make_split([s.id for s in samples], float(data["train_fraction"]),
                                     int(data["split_seed"]))
    by_id = {s.id: s for s in samples}
    return [by_id[i] for i in train_ids], [by_id[i] for i in test_ids]


def build_model(cfg: RunConfig) -> CSDNet:
    torch.manual_seed(cfg.seed)
    return CSDNet(cfg.model)


def model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    model = CSDNet(ModelConfig.from_dict(ckpt.config["model"]))
    load_model_state(model, ckpt.model_state())
    return model, ckpt


def _write_trace(path: Path, values: Sequence[float], header: str):
    path.write_text(f"# {header}\n" + "".join(f"{i}\t{v:.8g}\n" for i, v in enumerate(values)))


def cmd_pretrain(cfg: RunConfig, out: Path) -> Path:
    train, _ = load_samples(cfg)
    if not train:
        raise DataError("no training samples for pre-training")
    model = build_model(cfg)
    res = pretrain_depth_encoder(train, model.depth_encoder, model.thermal_encoder, cfg.samaep)
    ckpt = save_checkpoint(out / "pretrain", model, cfg.resolved(), epoch=len(res.epoch_losses),
                           loss_trace=res.epoch_losses, extra={"stage": "pretrain"})
    _write_trace(out / "pretrain_trace.txt", res.epoch_losses, "epoch\tL_pretrain")
    log.info("pre-training done: final loss %.6f -> %s", res.epoch_losses[-1], ckpt)
    return ckpt


def cmd_train(cfg: RunConfig, out: Path, pretrained: Optional[str] = None, resume: Optional[str] = None,
              checkpoint_every: int = 1) -> Path:
    train, test = load_samples(cfg)
    if not train:
        raise DataError("no training samples")
    model = build_model(cfg)
    start_epoch = 0
    trace: List[float] = []
    opt_state = None
    if resume:
        ckpt = load_checkpoint(resume)
        load_model_state(model, ckpt.model_state())
        start_epoch, trace = ckpt.epoch, list(ckpt.loss_trace)
        opt_state = optimizer_state(ckpt)
    elif cfg.samaep_enabled:
        if pretrained:
            ckpt = load_checkpoint(pretrained)
            load_model_state(model.depth_encoder, ckpt.model_state(), prefix="depth_encoder.")
        else:
            res = pretrain_depth_encoder(train, model.depth_encoder, model.thermal_encoder, cfg.samaep)
            _write_trace(out / "pretrain_trace.txt", res.epoch_losses, "epoch\tL_pretrain")

    trainer = Trainer(model, train, cfg.optim, holdout=test)
    if opt_state is not None:
        trainer.optimizer.load_state_dict(opt_state)

    def on_epoch_end(epoch, tr, res):
        if (epoch + 1) % checkpoint_every == 0 or epoch + 1 == cfg.optim.epochs:
            save_checkpoint(out / "last", model, cfg.resolved(), epoch=epoch + 1,
                            loss_trace=trace + res.step_losses, optimizer=tr.optimizer)

    res = trainer.run(start_epoch=start_epoch, on_epoch_end=on_epoch_end)
    trace += res.step_losses
    if res.best_state is not None:
        best = copy.deepcopy(model)
        best.load_state_dict(res.best_state)
        save_checkpoint(out / "best", best, cfg.resolved(), epoch=res.best_epoch + 1, loss_trace=trace,
                        extra={"holdout_mae": res.best_mae})
    (out / "train_trace.json").write_text(json.dumps(
        {"step_losses": trace, "epoch_losses": res.epoch_losses, "eval": res.eval_trace}, indent=2))
    return out / "last.npz"


def cmd_eval(cfg: RunConfig, out: Path, checkpoint: Optional[str] = None, pred_dir: Optional[str] = None,
             plots: bool = False):
    """Evaluate a checkpoint on the test split, or PNG predictions in ``pred_dir`` against the dataset."""
    if pred_dir:
        root = cfg.raw["data"].get("root")
        if not root:
            raise ConfigError("--pred-dir needs data.root for ground truth")
        layout = DatasetLayout(**cfg.raw["data"].get("layout", {}))
        ids = list_sample_ids(root, layout)
        preds, gts = [], []
        for i in ids:
            p = Path(pred_dir) / f"{i}{layout.suffix}"
            if not p.is_file():
                raise DataError(f"missing prediction: {p}")
            g = _read_gray(Path(root) / layout.gt_dir / f"{i}{layout.suffix}") >= 0.5
            preds.append(_read_gray(p, g.shape).astype(np.float64))
            gts.append(g)
    else:
        if not checkpoint:
            raise ConfigError("eval needs --checkpoint or --pred-dir")
        model, _ = model_from_checkpoint(checkpoint)
        cfg.model = model.cfg
        _, test = load_samples(cfg)
        if not test:
            raise DataError("no test samples to evaluate")
        preds = predict(model, test)
        gts = [s.gt for s in test]
        ids = [s.id for s in test]
        for i, p in zip(ids, preds):
            write_png(out / "preds" / f"{i}.png", p)
    report = evaluate(preds, gts, ids)
    report.write(out, plots=plots)
    print(report.table(), end="")
    return report


def _load_pair(model: CSDNet, depth_path, thermal_path, invert_depth: bool = True):
    size = tuple(model.cfg.encoder.input_size)
    for p in (depth_path, thermal_path):
        if not Path(p).is_file():
            raise DataError(f"image not found: {p}")
    d = _read_gray(Path(depth_path), size)
    if invert_depth:
        d = 1.0 - d
    t = _read_gray(Path(thermal_path), size)
    return Sample("input", d, t, np.zeros(size))


def cmd_infer(checkpoint, depth_path, thermal_path, out_path, debug: bool = False, invert_depth: bool = True):
    model, _ = model_from_checkpoint(checkpoint)
    sample = _load_pair(model, depth_path, thermal_path, invert_depth)
    preds, masks = predict(model, [sample], with_masks=True)
    out_path = Path(out_path)
    write_png(out_path, preds[0])
    written = [out_path]
    if debug:
        if masks:
            md, mt = masks[0]
        else:
            md, mt = (cfar_detect(x, c) for x, c in ((sample.depth, model.cfg.cfar_depth),
                                                      (sample.thermal, model.cfg.cfar_thermal)))
        stem = out_path.with_suffix("")
        written.append(write_png(f"{stem}_mask_depth.png", md))
        written.append(write_png(f"{stem}_mask_thermal.png", mt))
    return written


def cmd_cfar_preview(image_path, out_path, cfg: CfarConfig, invert: bool = False):
    p = Path(image_path)
    if not p.is_file():
        raise DataError(f"image not found: {p}")
    img = _read_gray(p)
    if invert:
        img = 1.0 - img
    mask = cfar_detect(img, cfg)
    out_path = Path(out_path)
    write_png(out_path, mask)
    summary = (
        f"image: {p}\n"
        f"shape: {img.shape[0]}x{img.shape[1]}\n"
        f"window_radius: {cfg.window_radius}\nguard_radius: {cfg.guard_radius}\n"
        f"threshold_scale: {cfg.threshold_scale:.6g}\n"
        f"configured_pfa: {cfg.pfa:.6g}\n"
        f"detection_fraction: {float(mask.mean()):.6g}\n"
    )
    out_path.with_suffix(".txt").write_text(summary)
    print(summary, end="")
    return mask


def cmd_report_cost(cfg: RunConfig, out: Path, n_timed: int = 50) -> dict:
    model = build_model(cfg)
    rep = cost_report(model, n_timed=n_timed)
    lines = [f"# FLOP convention: {rep['flop_convention']}",
             f"input_size: {rep['input_size'][0]}x{rep['input_size'][1]}",
             f"params: {rep['params']} ({rep['params'] / 1e6:.3f} M)"]
    lines += [f"  {k}: {v}" for k, v in rep["params_by_module"].items() if k != "total"]
    lines += [f"flops: {rep['flops']} ({rep['flops'] / 1e9:.3f} G)",
              f"latency_ms_median: {rep['latency_ms_median']:.2f} over {rep['n_timed']} runs"]
    text = "\n".join(lines) + "\n"
    (out / "cost.txt").write_text(text)
    (out / "cost.json").write_text(json.dumps(rep, indent=2))
    print(text, end="")
    return rep


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (repeatable)")
    p.add_argument("--output-dir", help="parent directory for run directories")
    p.add_argument("--run-dir", help="exact run directory (skips timestamping)")
    p.add_argument("--seed", type=int)
    p.add_argument("--width", type=float, help="encoder width multiplier")
    p.add_argument("--input-size", type=int, help="square input side (multiple of 32)")
    p.add_argument("--data-root", help="dataset root with D/, T/, GT/")
    p.add_argument("--synthetic", type=int, metavar="N", help="number of synthetic samples")
    p.add_argument("--no-cfar", action="store_true", help="ablation: no CFAR prescreening")
    p.add_argument("--no-ican", action="store_true", help="ablation: no deep soft-logic fusion")
    p.add_argument("--no-samaep", action="store_true", help="ablation: skip encoder pre-training")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csdnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="encoder pre-training against embeddings")
    _common(p)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--embedding-index", help="index file of .emb embeddings")

    p = sub.add_parser("train", help="joint encoder-decoder training")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--embedding-index")
    p.add_argument("--pretrained", help="checkpoint written by 'pretrain'")
    p.add_argument("--resume", help="checkpoint written by 'train' to continue from")
    p.add_argument("--checkpoint-every", type=int, default=1)

    p = sub.add_parser("eval", help="metrics report for a checkpoint or prediction PNGs")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--pred-dir", help="directory of <id>.png predictions")
    p.add_argument("--plots", action="store_true", help="also render curves.png")

    p = sub.add_parser("infer", help="saliency map for one depth/thermal pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--thermal", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--debug", action="store_true", help="also write both CFAR masks")
    p.add_argument("--no-invert-depth", action="store_true")

    p = sub.add_parser("cfar-preview", help="CFAR mask of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--window-radius", type=int, default=8)
    p.add_argument("--guard-radius", type=int, default=2)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--threshold-scale", type=float)
    g.add_argument("--pfa", type=float)
    p.add_argument("--polarity", choices=["high", "low"], default="high")
    p.add_argument("--border-policy", choices=["reflect", "shrink"], default="reflect")
    p.add_argument("--invert", action="store_true", help="invert intensities first (raw depth)")

    p = sub.add_parser("report-cost", help="parameters, FLOPs and latency")
    _common(p)
    p.add_argument("--n-timed", type=int, default=50)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "infer":
            for p in cmd_infer(args.checkpoint, args.depth, args.thermal, args.output, args.debug,
                               not args.no_invert_depth):
                print(p)
            return EXIT_OK
        if args.command == "cfar-preview":
            ts = args.threshold_scale
            if args.pfa is not None:
                ts = threshold_from_pfa(args.pfa)
            cfg = CfarConfig(args.window_radius, args.guard_radius, 3.0 if ts is None else ts,
                             args.polarity, args.border_policy)
            cmd_cfar_preview(args.image, args.output, cfg, args.invert)
            return EXIT_OK

        cfg = build_config(args)
        out = make_run_dir(cfg, args.command, args.run_dir)
        if args.command == "pretrain":
            cmd_pretrain(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out, args.pretrained, args.resume, args.checkpoint_every)
        elif args.command == "eval":
            cmd_eval(cfg, out, args.checkpoint, args.pred_dir, args.plots)
        elif args.command == "report-cost":
            cmd_report_cost(cfg, out, args.n_timed)
        print(out)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DomainError, CSDNetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None):
    sys.exit(run(argv))
