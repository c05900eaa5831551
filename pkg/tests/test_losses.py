import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from _oracles import fd_check
from csdnet.errors import DegenerateAttentionError, DomainError
from csdnet.losses import (ChannelAttention, SpatialAttention, TransferCriterion, TransferWeights, bce_loss,
                           channel_attention, extract_boundary, gnorm, gtl, ioubce, iou_loss, l2norm_channel,
                           l2norm_plane, sal, samaep_loss, sod_loss, stl)

D = torch.float64


def rnd(*shape, seed=0):
    return torch.randn(*shape, dtype=D, generator=torch.Generator().manual_seed(seed))


# ---------------------------------------------------------------- normalizers

def test_gnorm_examples():
    assert torch.equal(gnorm(torch.ones(4)), torch.full((4,), 0.25))
    assert torch.equal(gnorm(torch.tensor([2.0, 0, 0])), torch.tensor([1.0, 0, 0]))
    with pytest.raises(DegenerateAttentionError):
        gnorm(torch.zeros(3))


@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=20))
def test_gnorm_probability_vector(v):
    out = gnorm(torch.tensor(v, dtype=D))
    assert torch.all(out >= 0) and abs(out.sum().item() - 1) < 1e-9


def test_l2norm_plane():
    assert torch.allclose(l2norm_plane(torch.full((1, 2, 2), 2.0, dtype=D)), torch.full((1, 2, 2), 0.5, dtype=D))
    x = rnd(2, 3, 5, 5)
    y = l2norm_plane(x)
    assert torch.allclose(y.pow(2).sum((-2, -1)), torch.ones(2, 3, dtype=D), atol=1e-6)
    assert torch.allclose(l2norm_plane(y), y, atol=1e-7)
    assert torch.isfinite(l2norm_plane(torch.zeros(1, 1, 2, 2))).all()


def test_l2norm_channel():
    x = torch.ones(1, 2, 3, 3, dtype=D)
    assert torch.allclose(l2norm_channel(x), torch.full_like(x, 1 / math.sqrt(2)))
    onehot = torch.zeros(1, 3, 2, 2, dtype=D)
    onehot[0, 1] = 1
    assert torch.allclose(l2norm_channel(onehot), onehot)
    y = l2norm_channel(rnd(2, 4, 3, 3))
    assert torch.allclose(y.pow(2).sum(1), torch.ones(2, 3, 3, dtype=D), atol=1e-6)


# ---------------------------------------------------------------- attention

def test_channel_attention_uniform_and_single():
    att = ChannelAttention(6).double()
    for p in att.parameters():
        torch.nn.init.zeros_(p)
    assert torch.allclose(channel_attention(rnd(2, 6, 4, 4), att), torch.full((2, 6), 1 / 6, dtype=D))
    one = ChannelAttention(1).double()
    assert torch.allclose(one(rnd(3, 1, 4, 4)), torch.ones(3, 1, dtype=D))


def _channel_attention_loop(att, f):
    w1, b1 = att.fc1.weight[:, :, 0, 0], att.fc1.bias
    w2, b2 = att.fc2.weight[:, :, 0, 0], att.fc2.bias
    b, c = f.shape[:2]
    out = []
    for n in range(b):
        pooled = [f[n, k].mean().item() for k in range(c)]
        hid = [max(0.0, sum(w1[j, k].item() * pooled[k] for k in range(c)) + b1[j].item()) for j in range(w1.shape[0])]
        s = [1 / (1 + math.exp(-(sum(w2[k, j].item() * hid[j] for j in range(len(hid))) + b2[k].item())))
             for k in range(c)]
        out.append([v / sum(s) for v in s])
    return torch.tensor(out, dtype=D)


def _spatial_attention_loop(att, f):
    w1, b1 = att.fc1.weight[:, 0, 0, 0], att.fc1.bias
    w2, b2 = att.fc2.weight[0, :, 0, 0], att.fc2.bias
    b, c, h, w = f.shape
    out = []
    for n in range(b):
        s = []
        for y in range(h):
            for x in range(w):
                m = sum(f[n, k, y, x].item() for k in range(c)) / c
                hid = [max(0.0, w1[j].item() * m + b1[j].item()) for j in range(len(w1))]
                s.append(1 / (1 + math.exp(-(sum(w2[j].item() * hid[j] for j in range(len(hid))) + b2[0].item()))))
        out.append([v / sum(s) for v in s])
    return torch.tensor(out, dtype=D)


def test_channel_attention_matches_loop():
    att = ChannelAttention(8).double()
    f = rnd(2, 8, 3, 3)
    assert torch.allclose(att(f), _channel_attention_loop(att, f), atol=1e-12)


def test_stl_matches_loop():
    att = ChannelAttention(4).double()
    a, b = rnd(2, 4, 3, 3, seed=1), rnd(2, 4, 3, 3, seed=2)
    w = _channel_attention_loop(att, a)
    total = 0.0
    for n in range(2):
        for c in range(4):
            na = math.sqrt(sum(a[n, c, y, x].item() ** 2 for y in range(3) for x in range(3)) + 1e-12)
            nb = math.sqrt(sum(b[n, c, y, x].item() ** 2 for y in range(3) for x in range(3)) + 1e-12)
            mse = sum((a[n, c, y, x].item() / na - b[n, c, y, x].item() / nb) ** 2
                      for y in range(3) for x in range(3)) / 9
            total += w[n, c].item() * mse
    assert abs(stl(a, b, att).item() - total / 2) < 1e-12


def test_gtl_matches_loop():
    att = SpatialAttention().double()
    a, b = rnd(2, 3, 4, 4, seed=3), rnd(2, 3, 4, 4, seed=4)
    w = _spatial_attention_loop(att, a)
    total = 0.0
    for n in range(2):
        for y in range(4):
            for x in range(4):
                na = math.sqrt(sum(a[n, c, y, x].item() ** 2 for c in range(3)) + 1e-12)
                nb = math.sqrt(sum(b[n, c, y, x].item() ** 2 for c in range(3)) + 1e-12)
                mse = sum((a[n, c, y, x].item() / na - b[n, c, y, x].item() / nb) ** 2 for c in range(3)) / 3
                total += w[n, y * 4 + x].item() * mse
    assert abs(gtl(a, b, att).item() - total / 2) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_transfer_losses_nonnegative_and_zero_on_match(seed):
    a, b = rnd(2, 4, 4, 4, seed=seed), rnd(2, 4, 4, 4, seed=seed + 1)
    ca, sa = ChannelAttention(4).double(), SpatialAttention().double()
    assert stl(a, b, ca) >= 0 and gtl(a, b, sa) >= 0
    assert stl(a, a.clone(), ca) < 1e-10 and gtl(a, a.clone(), sa) < 1e-10


def test_shape_errors():
    a, b = rnd(1, 4, 4, 4), rnd(1, 4, 4, 3)
    for fn, att in ((stl, ChannelAttention(4)), (gtl, SpatialAttention())):
        with pytest.raises(DomainError):
            fn(a, b, att.double())
    with pytest.raises(DomainError):
        ioubce(torch.rand(1, 4, 4), torch.rand(1, 4, 5))


def test_detach_contract():
    for fn, att in ((stl, ChannelAttention(4)), (gtl, SpatialAttention())):
        src = rnd(2, 4, 5, 5, seed=5).requires_grad_()
        dst = rnd(2, 4, 5, 5, seed=6).requires_grad_()
        g_src, g_dst = torch.autograd.grad(fn(src, dst, att.double()), [src, dst], allow_unused=True)
        assert g_src is None or not g_src.any()
        assert g_dst is not None and g_dst.abs().sum() > 0


# ---------------------------------------------------------------- gradient suite

def test_stl_gtl_gradients():
    for fn, att in ((stl, ChannelAttention(4).double()), (gtl, SpatialAttention().double())):
        src = rnd(2, 4, 4, 4, seed=7)
        dst = rnd(2, 4, 4, 4, seed=8).requires_grad_()
        ts = [dst] + list(att.parameters())
        assert fd_check(lambda _: fn(src, dst, att), ts) < 1e-4


def test_sal_examples_and_gradient():
    att = ChannelAttention(8).double()
    s = rnd(2, 8, 4, 4, seed=9)
    assert sal(s.clone(), s, TransferWeights(), att).item() < 1e-10
    f = rnd(2, 8, 4, 4, seed=10)
    assert sal(f, s, TransferWeights(0, 0, 0, 0), att).item() == 0.0
    mse = ((f - s) ** 2).mean().item()
    want = mse + 0.5 * stl(f, s, att).item()
    assert abs(sal(f, s, TransferWeights(1, 0.5), att).item() - want) < 1e-12
    # the embedding side and the attention head are live everywhere
    s_live = s.clone().requires_grad_()
    assert fd_check(lambda _: sal(f, s_live, TransferWeights(), att), [s_live] + list(att.parameters())) < 1e-4
    # the projected features are live only through the MSE term
    f_live = f.clone().requires_grad_()
    assert fd_check(lambda _: sal(f_live, s, TransferWeights(1.0, 0.0), att), [f_live]) < 1e-4


def _pyramids(seed, channels=(3, 4, 4, 5, 6), size=16):
    g = torch.Generator().manual_seed(seed)
    mk = lambda: [torch.randn(2, c, size >> i, size >> i, dtype=D, generator=g) for i, c in enumerate(channels)]
    return mk(), mk()


def test_samaep_loss_examples():
    crit = TransferCriterion((3, 4, 4, 5, 6), embed_channels=8).double()
    pd, pt = _pyramids(0)
    s = rnd(2, 8, 4, 4, seed=11)
    zero = samaep_loss(pd, [p.clone() for p in pd], s.clone(), s, TransferWeights(), crit)
    assert zero.item() < 1e-10
    f = rnd(2, 8, 4, 4, seed=12)
    w = TransferWeights(1, 0.5, 0, 0)
    assert samaep_loss(pd, pt, f, s, w, crit).item() == sal(f, s, w, crit.sal_attention).item()
    terms = crit.terms(pd, pt, f, s, TransferWeights())
    assert set(terms) == {"sal", "total"} | {f"{k}_{d}_{i}" for k, st_ in (("gtl", (1, 2, 3)), ("stl", (3, 4, 5)))
                                            for d in ("d2t", "t2d") for i in st_}
    manual = sal(f, s, TransferWeights(), crit.sal_attention)
    for i in (1, 2, 3):
        manual = manual + 0.5 * gtl(pd[i - 1], pt[i - 1], crit.gtl_d2t[str(i)]) \
            + 0.5 * gtl(pt[i - 1], pd[i - 1], crit.gtl_t2d[str(i)])
    for i in (3, 4, 5):
        manual = manual + 0.5 * stl(pd[i - 1], pt[i - 1], crit.stl_d2t[str(i)]) \
            + 0.5 * stl(pt[i - 1], pd[i - 1], crit.stl_t2d[str(i)])
    assert abs(terms["total"].item() - manual.item()) < 1e-12


def test_samaep_loss_gradients():
    crit = TransferCriterion((3, 4, 4, 5, 6), embed_channels=8).double()
    pd, pt = _pyramids(1)
    s = rnd(2, 8, 4, 4, seed=13).requires_grad_()
    f = rnd(2, 8, 4, 4, seed=14)
    # embedding and attention heads, all terms active
    ts = [s] + list(crit.parameters())
    assert fd_check(lambda _: samaep_loss(pd, pt, f, s, TransferWeights(), crit), ts, n_probe=300) < 1e-4
    # thermal pyramid is live as the target of depth->thermal terms (w4 = 0 silences its detached role)
    pt_live = [p.clone().requires_grad_() for p in pt]
    fn = lambda _: samaep_loss(pd, pt_live, f, s.detach(), TransferWeights(1, 0.5, 0.5, 0.0), crit)
    assert fd_check(fn, pt_live, n_probe=300) < 1e-4
    pd_live = [p.clone().requires_grad_() for p in pd]
    fn = lambda _: samaep_loss(pd_live, pt, f, s.detach(), TransferWeights(1, 0.5, 0.0, 0.5), crit)
    assert fd_check(fn, pd_live, n_probe=300) < 1e-4
    f_live = f.clone().requires_grad_()
    fn = lambda _: samaep_loss(pd, pt, f_live, s.detach(), TransferWeights(1, 0.0, 0.5, 0.5), crit)
    assert fd_check(fn, [f_live]) < 1e-4


# ---------------------------------------------------------------- SOD loss

def test_extract_boundary_examples():
    assert not extract_boundary(torch.full((1, 1, 6, 6), 0.4)).any()
    m = torch.zeros(8, 8)
    m[2:6, 2:6] = 1
    b = extract_boundary(m)
    ring = torch.zeros(8, 8)
    ring[1:7, 1:7] = 1
    ring[3:5, 3:5] = 0
    assert torch.equal(b, ring)


def test_extract_boundary_step_edge():
    m = torch.zeros(10, 10)
    m[:, 4:] = 1
    b = extract_boundary(m)
    for y in range(10):
        for x in range(10):
            # distance to the edge between columns 3 and 4
            near = x in (3, 4)
            assert b[y, x].item() == float(near)


def test_ioubce_examples():
    ones = torch.ones(1, 4, 4, dtype=D)
    assert ioubce(ones, ones).item() < 1e-5
    g = (torch.rand(1, 6, 6, generator=torch.Generator().manual_seed(0)) > 0.5).to(D)
    p = torch.full_like(g, 0.5)
    assert abs(bce_loss(p, g).item() - math.log(2)) < 1e-6
    sg = g.sum().item()
    want_iou = 1 - (0.5 * sg + 1) / (0.5 * 36 + sg - 0.5 * sg + 1)
    assert abs(iou_loss(p, g).item() - want_iou) < 1e-12


def _ioubce_loop(p, g):
    b = p.shape[0]
    iou = bce = 0.0
    n = 0
    for k in range(b):
        inter = union_p = union_g = 0.0
        for v, t in zip(p[k].flatten().tolist(), g[k].flatten().tolist()):
            inter += v * t
            union_p += v
            union_g += t
            vc = min(max(v, 1e-6), 1 - 1e-6)
            bce -= t * math.log(vc) + (1 - t) * math.log(1 - vc)
            n += 1
        iou += 1 - (inter + 1) / (union_p + union_g - inter + 1)
    return iou / b + bce / n


def test_ioubce_matches_loop():
    g = torch.Generator().manual_seed(1)
    p = torch.rand(3, 1, 7, 7, dtype=D, generator=g)
    t = (torch.rand(3, 1, 7, 7, generator=g) > 0.6).to(D)
    assert abs(ioubce(p, t).item() - _ioubce_loop(p, t)) < 1e-6


def _outs(seed, size=16, requires_grad=False):
    g = torch.Generator().manual_seed(seed)
    mk = lambda s: (0.05 + 0.9 * torch.rand(2, 1, s, s, dtype=D, generator=g)).requires_grad_(requires_grad)
    return SimpleNamespace(o=mk(size), o1=mk(size // 2), o2=mk(size // 4))


def test_sod_loss_examples():
    gt = torch.zeros(2, 1, 16, 16, dtype=D)
    gt[:, :, 4:12, 5:11] = 1
    perfect = SimpleNamespace(o=gt, o1=gt, o2=gt)
    assert sod_loss(perfect, gt).item() < 1e-4
    outs = _outs(2)
    up = lambda p: torch.nn.functional.interpolate(p, size=(16, 16), mode="bilinear", align_corners=False)
    want = 0.0
    for p in (outs.o, up(outs.o1), up(outs.o2)):
        want += _ioubce_loop(p, gt) + _ioubce_loop(extract_boundary(p), extract_boundary(gt))
    assert abs(sod_loss(outs, gt).item() - want) < 1e-6
    assert sod_loss(outs, gt).item() >= 0


def test_ioubce_and_sod_gradients():
    g = torch.Generator().manual_seed(3)
    p = (0.05 + 0.9 * torch.rand(2, 1, 6, 6, dtype=D, generator=g)).requires_grad_()
    t = (torch.rand(2, 1, 6, 6, generator=g) > 0.5).to(D)
    assert fd_check(lambda ts: ioubce(ts[0], t), [p]) < 1e-4
    outs = _outs(4, requires_grad=True)
    gt = (torch.rand(2, 1, 16, 16, generator=g) > 0.5).to(D)
    assert fd_check(lambda _: sod_loss(outs, gt), [outs.o, outs.o1, outs.o2]) < 1e-4
