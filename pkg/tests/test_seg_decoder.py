import numpy as np
import pytest
import torch
import torch.nn as nn
from oracles import boundary_bf

from mafs.config import NetConfig
from mafs.models import JointNet
from mafs.net_core import FeaturePyramid
from mafs.seg_decoder import ASPP, FPN, MST, SegDecoder, SegHead, binary_target, boundary_target


def tiny_cfg(**kw):
    base = dict(base_channels=8, level_channels=(8, 12, 16, 16), head_channels=8, mst_heads=2, num_classes=3)
    base.update(kw)
    return NetConfig(**base).validate()


def _pyramid(size=64, cfg=None):
    cfg = cfg or tiny_cfg()
    levels = {1: torch.randn(1, 8, size, size), 2: torch.randn(1, 8, size, size)}
    for level, c in zip(range(3, 7), cfg.level_channels):
        s = size // {3: 4, 4: 8, 5: 16, 6: 32}[level]
        levels[level] = torch.randn(1, c, s, s)
    return FeaturePyramid(levels, levels[1])


@torch.no_grad()
def test_fpn_and_aspp_keep_level_sizes():
    pyr = _pyramid()
    dec = SegDecoder(tiny_cfg()).eval()
    refined = dec.refine(pyr)
    for r, level in zip(refined, (3, 4, 5)):
        assert r.shape[-2:] == pyr[level].shape[-2:] and r.shape[1] == 8


@torch.no_grad()
def test_aspp_zero_branches_leave_pooled_context():
    aspp = ASPP(4).eval()
    for b in aspp.branches:
        nn.init.zeros_(b[0].weight)
    x = torch.randn(1, 4, 9, 9)
    out = aspp(x)
    # only the spatially constant pooled branch survives
    torch.testing.assert_close(out, out[..., :1, :1].expand_as(out))


@torch.no_grad()
def test_aspp_receptive_field_exceeds_a_single_conv():
    aspp = ASPP(4).eval()
    for p in aspp.pool.parameters():
        nn.init.zeros_(p)  # remove the global branch so only dilated paths matter
    x = torch.randn(1, 4, 32, 32)
    y = x.clone()
    y[..., 16, 16 + 12] += 5.0  # 12 px away: outside any 3x3 window
    d = (aspp(y) - aspp(x))[0, :, 16, 16].abs().max()
    assert d > 1e-4


@torch.no_grad()
def test_attention_rows_sum_to_one_and_stride():
    cfg = tiny_cfg()
    dec = SegDecoder(cfg).eval()
    pyr = _pyramid()
    logits, aux = dec(pyr, (64, 64))
    assert logits.shape == (1, 3, 64, 64)
    assert aux.boundary_logits.shape == (1, 2, 64, 64)
    assert aux.binary_logits.shape == (1, 1, 64, 64)
    assert aux.aux_seg_logits.shape == (1, 3, 64, 64)
    assert len(dec.mst.last_attention) == cfg.mst_stages
    for w in dec.mst.last_attention:
        torch.testing.assert_close(w.sum(-1), torch.ones(w.shape[:-1]), atol=1e-5, rtol=0)
    fs = dec.mst(pyr[5], dec.refine(pyr))
    assert fs.shape == (1, 8, 16, 16)


@torch.no_grad()
def test_mst_permutation_equivariance():
    mst = MST(8, 8, heads=2, stages=3, pos_embed=False).eval()
    q, kv = torch.randn(2, 16, 8), torch.randn(2, 16, 8)
    perm = torch.randperm(16)
    base = mst.attend(q, kv)
    # permuting keys/values leaves every query untouched
    torch.testing.assert_close(mst.attend(q, kv[:, perm]), base, atol=1e-5, rtol=1e-5)
    # permuting queries permutes the output; undoing it restores the result
    inv = torch.argsort(perm)
    torch.testing.assert_close(mst.attend(q[:, perm], kv[:, perm])[:, inv], base, atol=1e-5, rtol=1e-5)


@torch.no_grad()
def test_zero_head_ties_break_to_class_zero():
    head = SegHead(4, 3)
    nn.init.zeros_(head.classifier.weight)
    nn.init.zeros_(head.classifier.bias)
    logits = head(torch.randn(1, 4, 4, 4), (16, 16))
    assert torch.all(logits.argmax(1) == 0)


@torch.no_grad()
def test_upsample_argmax_agrees_away_from_boundaries():
    head = SegHead(4, 3)
    fs = torch.zeros(1, 4, 4, 4)
    fs[0, 0, :, :2] = 3.0
    fs[0, 1, :, 2:] = 3.0
    w = torch.zeros(3, 4, 1, 1)
    w[0, 0] = w[1, 1] = 1.0
    head.classifier.weight.copy_(w)
    nn.init.zeros_(head.classifier.bias)
    up = head(fs, (16, 16)).argmax(1)[0]
    near = head.classifier(fs).argmax(1)[0].repeat_interleave(4, 0).repeat_interleave(4, 1)
    agree = up == near
    assert agree[:, :6].all() and agree[:, 10:].all()


@pytest.mark.parametrize("seed", range(5))
def test_boundary_target_matches_morphology(seed):
    rng = np.random.default_rng(seed)
    lab = np.zeros((12, 12), dtype=np.int64)
    for c in (1, 2):
        y, x = rng.integers(0, 9, 2)
        lab[y : y + rng.integers(2, 6), x : x + rng.integers(2, 6)] = c
    got = boundary_target(torch.from_numpy(lab)[None])[0].numpy()
    np.testing.assert_array_equal(got, boundary_bf(lab))


def test_boundary_target_marks_ignored():
    lab = torch.zeros(1, 4, 4, dtype=torch.long)
    lab[0, 0, 0] = 255
    assert boundary_target(lab)[0, 0, 0] == 255


def test_binary_target():
    lab = torch.tensor([[[0, 1, 2, 255]]])
    target, valid = binary_target(lab)
    assert target.tolist() == [[[0.0, 1.0, 1.0, 0.0]]]
    assert valid.tolist() == [[[True, True, True, False]]]


def test_overfit_two_class_toy_scene():
    torch.manual_seed(0)
    cfg = tiny_cfg(num_classes=2, base_channels=8, level_channels=(8, 8, 8, 8), head_channels=8)
    net = JointNet(cfg)
    vi = torch.rand(1, 3, 64, 64) * 0.2
    lab = torch.zeros(1, 64, 64, dtype=torch.long)
    lab[:, 16:44, 20:48] = 1
    vi[:, :, 16:44, 20:48] += 0.6
    ir = vi.mean(1, keepdim=True)
    opt = torch.optim.Adam(net.parameters(), lr=3e-3)
    for _ in range(300):
        out = net(vi, ir, with_fusion=False)
        loss = nn.functional.cross_entropy(out.logits, lab)
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    with torch.no_grad():
        acc = (net(vi, ir, with_fusion=False).logits.argmax(1) == lab).float().mean()
    assert acc >= 0.99


def test_fpn_uses_top_level():
    fpn = FPN((4, 4, 4, 4), 4).eval()
    levels = {3: torch.zeros(1, 4, 8, 8), 4: torch.zeros(1, 4, 4, 4), 5: torch.zeros(1, 4, 2, 2), 6: torch.zeros(1, 4, 1, 1)}
    base = fpn(levels)[3]
    levels[6] = torch.ones(1, 4, 1, 1)
    assert not torch.allclose(fpn(levels)[3], base)
