import numpy as np
import pytest
import torch

from csdnet.checkpoint import load_checkpoint, load_model_state, optimizer_state, save_checkpoint
from csdnet.data import synthetic_dataset
from csdnet.encoder import EncoderConfig, count_parameters
from csdnet.errors import WeightLoadError
from csdnet.losses import sod_loss
from csdnet.model import CSDNet, ModelConfig
from csdnet.training import OptimConfig, Trainer, cost_report, count_flops, predict


def small(**kw):
    return ModelConfig(encoder=EncoderConfig(0.25, (64, 64)), **kw)


def test_sod_loss_decreases_on_one_sample():
    """Overfitting one sample: the loss falls step after step early on."""
    monotone = 0
    for seed in range(10):
        torch.manual_seed(seed)
        model = CSDNet(small())
        sample = synthetic_dataset(1, seed=seed)
        tr = Trainer(model, sample, OptimConfig(learning_rate=1e-3, batch_size=1, epochs=50, seed=seed))
        losses = tr.run().step_losses
        assert min(losses) >= 0
        monotone += bool(np.all(np.diff(losses) < 0))
    assert monotone >= 9


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    model = CSDNet(small()).eval()
    path = save_checkpoint(tmp_path / "ck", model, {"model": model.cfg.to_dict()}, epoch=3, loss_trace=[1.0, 0.5])
    ck = load_checkpoint(path)
    assert ck.epoch == 3 and ck.loss_trace == [1.0, 0.5] and ck.format_version == 1
    rebuilt = CSDNet(ModelConfig.from_dict(ck.config["model"])).eval()
    assert count_parameters(rebuilt) == count_parameters(model)
    assert [p.shape for p in rebuilt.parameters()] == [p.shape for p in model.parameters()]
    load_model_state(rebuilt, ck.model_state())
    d, t = torch.rand(2, 1, 64, 64), torch.rand(2, 1, 64, 64)
    for a, b in zip(model(d, t).as_tuple(), rebuilt(d, t).as_tuple()):
        assert torch.equal(a, b)


def test_checkpoint_errors(tmp_path):
    model = CSDNet(small())
    path = save_checkpoint(tmp_path / "ck", model, {})
    state = load_checkpoint(path).model_state()
    with pytest.raises(WeightLoadError):
        load_model_state(CSDNet(ModelConfig(encoder=EncoderConfig(0.5, (64, 64)))), state)
    with pytest.raises(WeightLoadError):
        # the ICAN tensors are absent from a model trained without it
        load_model_state(model, {k: v for k, v in state.items() if not k.startswith("ican.")})
    load_model_state(CSDNet(small(use_ican=False)), {k: v for k, v in state.items() if not k.startswith("ican.")})
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_resume_continues_trajectory(tmp_path):
    samples = synthetic_dataset(8, seed=3)
    cfg = OptimConfig(learning_rate=1e-3, batch_size=4, epochs=2, seed=7)
    torch.manual_seed(0)
    straight = Trainer(CSDNet(small()), samples, cfg).run().step_losses

    torch.manual_seed(0)
    model = CSDNet(small())
    tr = Trainer(model, samples, cfg)
    first = tr.run(epochs=1).step_losses
    path = save_checkpoint(tmp_path / "mid", model, {"model": model.cfg.to_dict()}, epoch=1,
                           loss_trace=first, optimizer=tr.optimizer)

    ck = load_checkpoint(path)
    torch.manual_seed(123)  # a different init must be fully overwritten
    model2 = CSDNet(ModelConfig.from_dict(ck.config["model"]))
    load_model_state(model2, ck.model_state())
    tr2 = Trainer(model2, samples, cfg)
    tr2.optimizer.load_state_dict(optimizer_state(ck))
    resumed = tr2.run(start_epoch=ck.epoch).step_losses
    assert first == straight[:2]
    assert abs(resumed[0] - straight[2]) < 1e-6


def test_best_state_tracks_holdout_mae():
    samples = synthetic_dataset(6, seed=1)
    torch.manual_seed(0)
    tr = Trainer(CSDNet(small()), samples[:4], OptimConfig(epochs=4, batch_size=4, eval_every=1), holdout=samples[4:])
    res = tr.run()
    assert len(res.eval_trace) == 4
    assert res.best_mae == min(e["mae"] for e in res.eval_trace)
    assert res.best_state is not None and res.best_epoch == min(res.eval_trace, key=lambda e: e["mae"])["epoch"]


def test_predict_shapes_and_masks():
    model = CSDNet(small())
    samples = synthetic_dataset(3)
    preds, masks = predict(model, samples, batch_size=2, with_masks=True)
    assert len(preds) == 3 and preds[0].shape == (64, 64) and len(masks) == 3
    assert all(0 <= p.min() and p.max() <= 1 for p in preds)


def test_flop_count_closed_form():
    conv = torch.nn.Conv2d(3, 8, 3, padding=1)
    assert count_flops(conv, torch.zeros(1, 3, 10, 10)) == 2 * 8 * 100 * 27
    lin = torch.nn.Linear(5, 7)
    assert count_flops(lin, torch.zeros(2, 5)) == 2 * 35


def test_flops_scale_with_area_and_cost_report():
    m64 = CSDNet(small())
    m128 = CSDNet(ModelConfig(encoder=EncoderConfig(0.25, (128, 128))))
    f64 = count_flops(m64, torch.rand(1, 1, 64, 64), torch.rand(1, 1, 64, 64))
    f128 = count_flops(m128, torch.rand(1, 1, 128, 128), torch.rand(1, 1, 128, 128))
    assert abs(f128 / f64 - 4.0) < 0.2 * 4.0
    rep = cost_report(m64, n_timed=50, warmup=1)
    assert rep["params"] == count_parameters(m64) and rep["flops"] == f64 and rep["n_timed"] == 50
    assert "2 x MAC" in rep["flop_convention"]


def test_ablation_parameter_accounting():
    full = CSDNet(small())
    no_ican = CSDNet(small(use_ican=False))
    assert count_parameters(full) - count_parameters(no_ican) == count_parameters(full.ican)
    assert count_parameters(CSDNet(small(use_cfar=False))) == count_parameters(full)
