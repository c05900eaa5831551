"""Exit criteria.  Each test prints one PASS/FAIL line before asserting.

Run alone with ``pytest -m acceptance -s`` (the lines are printed even
without ``-s``).
"""

import math
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from _oracles import (best_single_modality_fm, dense_weighted_f, fd_check, gaussian_tail_quadrature, loop_em,
                      loop_fm, loop_mae, naive_cfar, reference_s_measure)
from csdnet.cfar import CfarConfig, cfar_detect
from csdnet.data import synthetic_dataset
from csdnet.encoder import EncoderConfig, count_parameters
from csdnet.ican import soft_logic
from csdnet.losses import (ChannelAttention, SpatialAttention, TransferCriterion, TransferWeights, gtl, ioubce,
                           sal, samaep_loss, sod_loss, stl)
from csdnet.metrics import curves, e_measure, f_measure, mae, s_measure, weighted_f
from csdnet.model import CSDNet, ModelConfig
from csdnet.samaep import PretrainConfig, pretrain_depth_encoder
from csdnet.training import OptimConfig, Trainer, predict
from test_metrics import random_case

pytestmark = pytest.mark.acceptance
D = torch.float64


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return ok
    return emit


def small(**kw):
    return ModelConfig(encoder=EncoderConfig(0.25, (64, 64)), **kw)


def test_cfar_calibration(report):
    target = gaussian_tail_quadrature(3.0)
    # a 33x33 window with a 5x5 guard block: 1064 training cells, so the
    # estimated background statistics are close enough to the truth
    cfg = CfarConfig(window_radius=16, guard_radius=2, threshold_scale=3.0)
    t0 = time.perf_counter()
    rates = [cfar_detect(np.random.default_rng(seed).standard_normal((256, 256)), cfg).mean() for seed in range(20)]
    elapsed = time.perf_counter() - t0
    mean = float(np.mean(rates))
    se = float(np.std(rates, ddof=1) / math.sqrt(len(rates)))
    ok = abs(mean - target) < 3 * se and elapsed < 30
    report("CFAR calibration", ok, f"mean rate {mean:.4e} vs {target:.4e} (|diff| = {abs(mean - target) / se:.2f} SE), "
                                   f"{elapsed:.1f} s")
    assert ok


def test_cfar_oracle(report):
    rng = np.random.default_rng(2024)
    exact = 0
    for _ in range(50):
        h, w = rng.integers(4, 33, size=2)
        r = int(rng.integers(1, 6))
        cfg = CfarConfig(r, int(rng.integers(0, r)), float(rng.uniform(0.3, 3.5)),
                         str(rng.choice(["high", "low"])), str(rng.choice(["reflect", "shrink"])))
        img = rng.standard_normal((h, w))
        ref = naive_cfar(img, cfg.window_radius, cfg.guard_radius, cfg.threshold_scale,
                         cfg.polarity.value, cfg.border_policy.value)
        exact += np.array_equal(cfar_detect(img, cfg), ref)
    affine = 0
    for _ in range(50):
        img = rng.random((24, 24))
        a, b = float(rng.uniform(0.05, 20.0)), float(rng.uniform(-50.0, 50.0))
        cfg = CfarConfig(4, 1, threshold_scale=float(rng.uniform(0.5, 2.5)))
        affine += np.array_equal(cfar_detect(a * img + b, cfg), cfar_detect(img, cfg))
    ok = exact == 50 and affine == 50
    report("CFAR oracle", ok, f"{exact}/50 bit-exact vs loop oracle, {affine}/50 affine draws invariant")
    assert ok


def test_soft_logic_identities(report):
    g = torch.Generator().manual_seed(7)
    fails = {"xor": 0, "order": 0, "swap": 0}
    for k in range(1000):
        scale = 10.0 ** (k % 7 - 3)
        a = torch.randn(2, 4, 5, 5, generator=g) * scale
        b = torch.randn(2, 4, 5, 5, generator=g)
        r, s = soft_logic(a, b), soft_logic(b, a)
        ulp = torch.from_numpy(np.spacing(r.xor_map.numpy()))
        fails["xor"] += bool(((r.xor_map - (r.or_map - r.and_map)).abs() > ulp).any())
        fails["order"] += bool((r.and_map > r.or_map).any())
        fails["swap"] += not all(torch.equal(x, y) for x, y in zip(r.concatenated, s.concatenated))
    ok = not any(fails.values())
    report("Soft-logic identities", ok, f"violations over 1000 pairs: {fails}")
    assert ok


def _rnd(*shape, seed):
    return torch.randn(*shape, dtype=D, generator=torch.Generator().manual_seed(seed))


def test_loss_gradient_suite(report):
    errs = {}
    for name, fn, att in (("stl", stl, ChannelAttention(4).double()), ("gtl", gtl, SpatialAttention().double())):
        src, dst = _rnd(2, 4, 4, 4, seed=1), _rnd(2, 4, 4, 4, seed=2).requires_grad_()
        errs[name] = fd_check(lambda _: fn(src, dst, att), [dst] + list(att.parameters()))

    att = ChannelAttention(8).double()
    f, s = _rnd(2, 8, 4, 4, seed=3), _rnd(2, 8, 4, 4, seed=4).requires_grad_()
    f_live = f.clone().requires_grad_()
    errs["sal"] = max(fd_check(lambda _: sal(f, s, TransferWeights(), att), [s] + list(att.parameters())),
                      fd_check(lambda _: sal(f_live, s.detach(), TransferWeights(1.0, 0.0), att), [f_live]))

    crit = TransferCriterion((3, 4, 4, 5, 6), embed_channels=8).double()
    gen = torch.Generator().manual_seed(5)
    pyr = lambda: [torch.randn(2, c, 16 >> i, 16 >> i, dtype=D, generator=gen).requires_grad_()
                   for i, c in enumerate((3, 4, 4, 5, 6))]
    pd, pt = pyr(), pyr()
    # each pyramid is checked with the weight of its detached (source) role set to zero
    errs["samaep_loss"] = max(
        fd_check(lambda _: samaep_loss(pd, pt, f, s, TransferWeights(), crit), [s] + list(crit.parameters()),
                 n_probe=300),
        fd_check(lambda _: samaep_loss(pd, pt, f, s.detach(), TransferWeights(1, 0.5, 0.5, 0.0), crit), pt,
                 n_probe=300),
        fd_check(lambda _: samaep_loss(pd, pt, f, s.detach(), TransferWeights(1, 0.5, 0.0, 0.5), crit), pd,
                 n_probe=300),
        fd_check(lambda _: samaep_loss(pd, pt, f_live, s.detach(), TransferWeights(1, 0.0, 0.5, 0.5), crit),
                 [f_live]))

    gt = (torch.rand(2, 1, 8, 8, generator=gen) > 0.5).to(D)
    # maps strictly inside (0, 1) and free of ties, where the boundary max/min-pools are smooth
    prob = lambda s: (0.05 + 0.9 * torch.rand(2, 1, s, s, dtype=D, generator=gen)).requires_grad_()
    p = prob(8)
    errs["ioubce"] = fd_check(lambda ts: ioubce(ts[0], gt), [p])
    outs = SimpleNamespace(o=prob(8), o1=prob(4), o2=prob(2))
    errs["sod_loss"] = fd_check(lambda _: sod_loss(outs, gt), [outs.o, outs.o1, outs.o2])

    detach_ok = True
    for fn, att in ((stl, ChannelAttention(4).double()), (gtl, SpatialAttention().double())):
        src, dst = _rnd(2, 4, 5, 5, seed=8).requires_grad_(), _rnd(2, 4, 5, 5, seed=9).requires_grad_()
        g_src, g_dst = torch.autograd.grad(fn(src, dst, att), [src, dst], allow_unused=True)
        detach_ok &= (g_src is None or not g_src.any()) and bool(g_dst.abs().sum() > 0)

    ok = max(errs.values()) < 1e-4 and detach_ok
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    report("Loss gradient suite", ok, f"relative FD errors: {detail}; detach contract {'holds' if detach_ok else 'broken'}")
    assert ok


def test_metric_oracle_suite(report):
    worst = {"mae": 0.0, "fm": 0.0, "em": 0.0, "wf": 0.0, "sm": 0.0}
    for seed in range(100):
        pred, gt = random_case(1000 + seed)
        worst["mae"] = max(worst["mae"], abs(mae(pred, gt) - loop_mae(pred, gt)))
        worst["fm"] = max(worst["fm"], abs(f_measure(pred, gt) - loop_fm(pred, gt)))
        worst["em"] = max(worst["em"], abs(e_measure(pred, gt) - loop_em(pred, gt)))
        worst["wf"] = max(worst["wf"], abs(weighted_f(pred, gt) - dense_weighted_f(pred, gt)))
        worst["sm"] = max(worst["sm"], abs(s_measure(pred, gt) - reference_s_measure(pred, gt)))
    loops_ok = max(worst["mae"], worst["fm"], worst["em"]) < 1e-9
    dense_ok = max(worst["wf"], worst["sm"]) < 1e-6

    perfect_ok = True
    for seed in range(10):
        _, gt = random_case(seed)
        g = gt.astype(float)
        perfect_ok &= (mae(g, gt) == 0 and f_measure(g, gt) == 1 and abs(weighted_f(g, gt) - 1) < 1e-6
                       and abs(e_measure(g, gt) - 1) < 1e-6 and s_measure(g, gt) > 0.95)
    ok = loops_ok and dense_ok and perfect_ok
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report("Metric oracle suite", ok, f"max |diff| over 100 cases: {detail}; perfection cases {'hold' if perfect_ok else 'fail'}")
    assert ok


def test_training_sanity(report):
    t0 = time.perf_counter()
    converged, fused_wins, lines = 0, 0, []
    for seed in range(10):
        samples = synthetic_dataset(8, seed=seed)
        torch.manual_seed(seed)
        model = CSDNet(small())
        tr = Trainer(model, samples, OptimConfig(learning_rate=1e-3, batch_size=8, epochs=300, seed=seed))
        train_mae, epoch = float("inf"), 0
        while epoch < 300 and train_mae >= 0.05:
            tr.run(epochs=epoch + 25, start_epoch=epoch)
            epoch += 25
            preds = predict(model, samples)
            train_mae = float(np.mean([mae(p, s.gt) for p, s in zip(preds, samples)]))
        fused = float(curves(preds, [s.gt for s in samples])["fm"].max())
        single = best_single_modality_fm(samples)
        converged += train_mae < 0.05
        fused_wins += fused > single
        lines.append(f"seed {seed}: MAE {train_mae:.4f} at epoch {epoch}, best Fm {fused:.3f} vs single {single:.3f}")
    elapsed = time.perf_counter() - t0
    ok = converged >= 8 and fused_wins >= 8 and elapsed < 15 * 60
    report("Training sanity", ok, f"{converged}/10 seeds reach MAE < 0.05, fused Fm beats single-modality "
                                  f"baseline in {fused_wins}/10, {elapsed:.0f} s\n    " + "\n    ".join(lines))
    assert ok


def test_budget(report):
    n = count_parameters(CSDNet(ModelConfig()))
    ok = 4.2e6 <= n <= 7.8e6
    report("Budget check", ok, f"full-width parameters {n:,} (window [4.2M, 7.8M])")
    assert ok


def test_ablation_structure(report):
    samples = synthetic_dataset(4, seed=0)
    d = torch.from_numpy(np.stack([s.depth for s in samples]).astype(np.float32))[:, None]
    t = torch.from_numpy(np.stack([s.thermal for s in samples]).astype(np.float32))[:, None]
    optim = OptimConfig(batch_size=4, epochs=1)
    checks = {}

    torch.manual_seed(0)
    full = CSDNet(small())
    n_full = count_parameters(full)
    variants = {"no_cfar": small(use_cfar=False), "no_ican": small(use_ican=False), "no_samaep": small(use_samaep=False)}
    models = {}
    for name, cfg in variants.items():
        torch.manual_seed(0)
        models[name] = CSDNet(cfg)
        losses = Trainer(CSDNet(cfg), samples, optim).run().epoch_losses
        checks[f"{name} trains"] = len(losses) == 1 and np.isfinite(losses[0])

    # ICAN removal drops exactly the ICAN parameters, and leaves a decoder that ignores the injection
    checks["no_ican params"] = n_full - count_parameters(models["no_ican"]) == count_parameters(full.ican) > 0
    nf = [k for k in full.state_dict() if not k.startswith("ican.")]
    checks["no_ican names"] = nf == list(models["no_ican"].state_dict())

    # CFAR removal changes the path, not the parameters: identical to gating with empty masks
    checks["no_cfar params"] = count_parameters(models["no_cfar"]) == n_full
    models["no_cfar"].load_state_dict(full.state_dict())
    full.eval(), models["no_cfar"].eval()
    with torch.no_grad():
        zero = (torch.zeros_like(d), torch.zeros_like(t))
        checks["no_cfar path"] = torch.equal(models["no_cfar"](d, t).o, full(d, t, zero).o) and \
            not torch.equal(full(d, t).o, full(d, t, zero).o)

    # SAMAEP removal changes only the depth encoder's starting weights
    checks["no_samaep params"] = count_parameters(models["no_samaep"]) == n_full
    before = {k: v.clone() for k, v in full.state_dict().items()}
    pretrain_depth_encoder(samples, full.depth_encoder, full.thermal_encoder, PretrainConfig(epochs=1, batch_size=4))
    changed = {k.split(".")[0] for k, v in full.state_dict().items() if not torch.equal(v, before[k])}
    checks["no_samaep path"] = changed == {"depth_encoder"}
    full.load_state_dict(before)
    losses = Trainer(full, samples, optim).run().epoch_losses
    checks["full trains"] = len(losses) == 1 and np.isfinite(losses[0])

    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    report("Ablation structure", ok, f"{len(checks) - len(failed)}/{len(checks)} structural checks hold; "
                                     f"ICAN parameters {count_parameters(full.ican):,}" + (f"; failed {failed}" if failed else ""))
    assert ok
