"""Segmentation decoder: FPN + ASPP refinement, transformer aggregation, heads."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from mafs.config import NetConfig
from mafs.errors import NumericError
from mafs.imaging import IGNORE_INDEX
from mafs.net_core import FeaturePyramid, conv1x1, conv3x3, resize_to


@dataclass
class AuxOutputs:
    boundary_logits: torch.Tensor  # B x 2 x H x W
    binary_logits: torch.Tensor  # B x 1 x H x W
    aux_seg_logits: torch.Tensor  # B x K x H x W


def conv_bn_relu(cin, cout, k=3, dilation=1):
    pad = dilation * (k // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class FPN(nn.Module):
    """Lateral 1x1 + top-down add over levels 3..6; returns refined levels 3..5
    at their own resolutions."""

    def __init__(self, level_channels, dim):
        super().__init__()
        self.lateral = nn.ModuleList([conv1x1(c, dim) for c in level_channels])
        self.smooth = nn.ModuleList([conv_bn_relu(dim, dim) for _ in range(3)])

    def forward(self, levels):
        p = self.lateral[3](levels[6])
        out = {}
        for i in (5, 4, 3):
            p = self.lateral[i - 3](levels[i]) + resize_to(p, levels[i].shape[-2:])
            out[i] = self.smooth[i - 3](p)
        return out


class ASPP(nn.Module):
    def __init__(self, dim, rates=(1, 6, 12)):
        super().__init__()
        self.branches = nn.ModuleList([conv_bn_relu(dim, dim, 3, r) for r in rates])
        # no norm on the pooled branch: it is 1x1 spatially
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), conv1x1(dim, dim, bias=False), nn.ReLU(inplace=True))
        self.project = conv_bn_relu((len(rates) + 1) * dim, dim, k=1)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        outs.append(self.pool(x).expand(-1, -1, x.shape[-2], x.shape[-1]))
        return self.project(torch.cat(outs, dim=1))


class Attention(nn.Module):
    """Multi-head attention that also returns its (B, heads, Nq, Nk) weights."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, q, k, v):
        b, nq, d = q.shape
        nk = k.shape[1]
        h = self.heads
        q = self.q(q).view(b, nq, h, d // h).transpose(1, 2)
        k = self.k(k).view(b, nk, h, d // h).transpose(1, 2)
        v = self.v(v).view(b, nk, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        if not torch.isfinite(scores).all():
            raise NumericError("non-finite attention scores")
        w = torch.softmax(scores, dim=-1)
        out = (w @ v).transpose(1, 2).reshape(b, nq, d)
        return self.out(out), w


class MSTStage(nn.Module):
    def __init__(self, dim, heads, ffn_ratio=2):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_ratio * dim), nn.GELU(), nn.Linear(ffn_ratio * dim, dim))

    def forward(self, q, kv, pos=None):
        qn, kn = self.norm_q(q), self.norm_kv(kv)
        if pos is None:
            a, w = self.attn(qn, kn, kn)
        else:
            a, w = self.attn(qn + pos, kn + pos, kn)
        q = q + a
        q = q + self.ffn(self.norm_ffn(q))
        return q, w


class MST(nn.Module):
    """Queries from F^5 (projected, upsampled to stride 4) attend over the
    concatenated refined maps through a stack of transformer stages."""

    def __init__(self, top_channels, dim, heads=4, stages=3, pos_embed=True, pos_grid=16):
        super().__init__()
        self.query_proj = conv1x1(top_channels, dim)
        self.kv_proj = conv1x1(3 * dim, dim)
        self.stages = nn.ModuleList([MSTStage(dim, heads) for _ in range(stages)])
        self.pos = None
        if pos_embed:
            self.pos = nn.Parameter(torch.zeros(1, dim, pos_grid, pos_grid))
            nn.init.trunc_normal_(self.pos, std=0.02)
        self.last_attention = []

    def attend(self, q, kv, pos=None):
        """Token-level core: ``q`` (B, Nq, D), ``kv`` (B, Nk, D)."""
        weights = []
        for stage in self.stages:
            q, w = stage(q, kv, pos)
            weights.append(w)
        self.last_attention = weights
        return q

    def forward(self, f5, refined):
        size = refined[0].shape[-2:]
        kv = self.kv_proj(torch.cat([resize_to(r, size) for r in refined], dim=1))
        q = resize_to(self.query_proj(f5), size)
        b, d, h, w = q.shape
        pos = None
        if self.pos is not None:
            pos = resize_to(self.pos, (h, w)).flatten(2).transpose(1, 2)
        out = self.attend(q.flatten(2).transpose(1, 2), kv.flatten(2).transpose(1, 2), pos)
        return out.transpose(1, 2).reshape(b, d, h, w)


class SegHead(nn.Module):
    def __init__(self, dim, num_classes):
        super().__init__()
        self.classifier = conv1x1(dim, num_classes)

    def forward(self, fs, size):
        return resize_to(self.classifier(fs), size)


class AuxHeads(nn.Module):
    """Boundary (2-way), binary foreground (1 logit) and auxiliary semantic
    logits from the fused F^3 and F^4."""

    def __init__(self, c3, c4, dim, num_classes):
        super().__init__()
        self.reduce = conv_bn_relu(c3 + c4, dim)
        self.boundary = conv1x1(dim, 2)
        self.binary = conv1x1(dim, 1)
        self.seg = conv1x1(dim, num_classes)

    def forward(self, f3, f4, size) -> AuxOutputs:
        x = self.reduce(torch.cat([f3, resize_to(f4, f3.shape[-2:])], dim=1))
        return AuxOutputs(
            resize_to(self.boundary(x), size),
            resize_to(self.binary(x), size),
            resize_to(self.seg(x), size),
        )


class SegDecoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        c3, c4, c5, _ = cfg.level_channels
        dim = cfg.head_channels
        self.fpn = FPN(cfg.level_channels, dim)
        self.aspp = nn.ModuleList([ASPP(dim) for _ in range(3)])
        self.mst = MST(c5, dim, cfg.mst_heads, cfg.mst_stages, cfg.pos_embed)
        self.head = SegHead(dim, cfg.num_classes)
        self.aux = AuxHeads(c3, c4, dim, cfg.num_classes)

    def refine(self, pyramid: FeaturePyramid):
        fpn = self.fpn(pyramid.levels)
        return [self.aspp[k](fpn[level]) for k, level in enumerate((3, 4, 5))]

    def forward(self, pyramid: FeaturePyramid, size):
        refined = self.refine(pyramid)
        fs = self.mst(pyramid[5], refined)
        logits = self.head(fs, size)
        aux = self.aux(pyramid[3], pyramid[4], size)
        return logits, aux


# ---------------------------------------------------------------------------
# auxiliary targets


def boundary_target(labels: torch.Tensor, ignore_index=IGNORE_INDEX, background=0) -> torch.Tensor:
    """1 on object pixels whose 8-neighbourhood holds another (non-ignored)
    label, 0 elsewhere, ``ignore_index`` on ignored pixels. Borders replicate."""
    lab = labels.long()
    padded = F.pad(lab[:, None].float(), (1, 1, 1, 1), mode="replicate")[:, 0].long()
    h, w = lab.shape[-2:]
    edge = torch.zeros_like(lab, dtype=torch.bool)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            nb = padded[:, dy : dy + h, dx : dx + w]
            edge |= (nb != lab) & (nb != ignore_index)
    edge &= (lab != background) & (lab != ignore_index)
    out = edge.long()
    out[lab == ignore_index] = ignore_index
    return out


def binary_target(labels: torch.Tensor, ignore_index=IGNORE_INDEX, background=0):
    """(target, valid); foreground is any non-background, non-ignored class."""
    valid = labels != ignore_index
    target = ((labels != background) & valid).float()
    return target, valid
