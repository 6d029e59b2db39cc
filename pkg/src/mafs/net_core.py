"""Shared two-stream encoder and the cross-modal fusion blocks."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from mafs.config import NetConfig
from mafs.errors import InvalidInputError

LEVEL_STRIDES = {1: 1, 2: 1, 3: 4, 4: 8, 5: 16, 6: 32}


def conv3x3(cin, cout, stride=1, dilation=1, bias=True):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=bias)


def conv1x1(cin, cout, bias=True):
    return nn.Conv2d(cin, cout, 1, bias=bias)


def _same_shape(a: torch.Tensor, b: torch.Tensor, who: str):
    if a.shape != b.shape:
        raise InvalidInputError(f"{who}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def resize_to(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


@dataclass
class FeaturePyramid:
    """Fused features F^1..F^6 plus the progressive fusion output F^f."""

    levels: dict
    fused: torch.Tensor

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.levels[i]


class SFE(nn.Module):
    """Shallow feature extractor. Returns (intermediate, final) maps at full resolution.

    Convs are bias-free so an all-zero image maps to all-zero features.
    """

    def __init__(self, in_channels, channels):
        super().__init__()
        self.head = conv3x3(in_channels, channels, bias=False)
        self.body = nn.Sequential(
            conv3x3(channels, channels, bias=False),
            nn.LeakyReLU(0.2),
            conv3x3(channels, channels, bias=False),
        )
        self.act = nn.LeakyReLU(0.2)

    def forward(self, img):
        if not torch.isfinite(img).all():
            raise InvalidInputError("SFE input contains non-finite values")
        f1 = self.act(self.head(img))
        f2 = self.act(f1 + self.body(f1))
        return f1, f2


class DEM(nn.Module):
    """Gated rectification: ``x * sigmoid(gate(x)) + transform(x)``."""

    def __init__(self, channels):
        super().__init__()
        self.gate = conv3x3(channels, channels)
        self.transform = conv3x3(channels, channels)

    def forward(self, x):
        return x * torch.sigmoid(self.gate(x)) + self.transform(x)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = conv3x3(cout, cout, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Bottleneck(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        mid = max(cout // 4, 1)
        self.conv1 = conv1x1(cin, mid, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = conv3x3(mid, mid, stride, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = conv1x1(mid, cout, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


# blocks per level (3..6)
_DEPTHS = {"tiny": (1, 1, 1, 1), "resnet152": (3, 8, 36, 3)}


class Backbone(nn.Module):
    """``F^i = ResBlock(DEM(F^{i-1}))`` for levels 3..6 at strides 4, 8, 16, 32."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        block = BasicBlock if cfg.backbone == "tiny" else Bottleneck
        depths = _DEPTHS[cfg.backbone]
        cin = cfg.base_channels
        self.dems = nn.ModuleList()
        self.stages = nn.ModuleList()
        for i, (cout, depth) in enumerate(zip(cfg.level_channels, depths)):
            self.dems.append(DEM(cin))
            layers = []
            if i == 0:
                # extra stride-2 stem so that level 3 lands at stride 4
                layers += [conv3x3(cin, cin, stride=2, bias=False), nn.BatchNorm2d(cin), nn.ReLU(inplace=True)]
            layers.append(block(cin, cout, stride=2))
            layers += [block(cout, cout) for _ in range(depth - 1)]
            self.stages.append(nn.Sequential(*layers))
            cin = cout

    def forward(self, f2):
        out = {}
        x = f2
        for level, (dem, stage) in enumerate(zip(self.dems, self.stages), start=3):
            x = stage(dem(x))
            out[level] = x
        return out


class AFM(nn.Module):
    """Per-pixel softmax weighting of the two modalities."""

    def __init__(self, channels):
        super().__init__()
        self.weight_head = nn.Sequential(
            conv3x3(2 * channels, channels),
            nn.LeakyReLU(0.2),
            conv3x3(channels, 2),
        )

    def forward(self, f_vi, f_ir, return_weights=False):
        _same_shape(f_vi, f_ir, "AFM")
        w = torch.softmax(self.weight_head(torch.cat([f_vi, f_ir], dim=1)), dim=1)
        out = w[:, 0:1] * f_vi + w[:, 1:2] * f_ir
        return (out, w) if return_weights else out


class CAM(nn.Module):
    """Channel then spatial attention over the concatenated modalities, 1x1-projected back."""

    def __init__(self, channels, reduction=4, spatial_kernel=7):
        super().__init__()
        c2 = 2 * channels
        hidden = max(c2 // reduction, 1)
        self.mlp = nn.Sequential(conv1x1(c2, hidden, bias=False), nn.ReLU(inplace=True), conv1x1(hidden, c2, bias=False))
        self.spatial = nn.Conv2d(2, 1, spatial_kernel, padding=spatial_kernel // 2, bias=False)
        self.project = conv1x1(c2, channels, bias=False)

    def forward(self, f_vi, f_ir, return_attention=False):
        _same_shape(f_vi, f_ir, "CAM")
        x = torch.cat([f_vi, f_ir], dim=1)
        ca = torch.sigmoid(self.mlp(F.adaptive_avg_pool2d(x, 1)) + self.mlp(F.adaptive_max_pool2d(x, 1)))
        x = x * ca
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        sa = torch.sigmoid(self.spatial(pooled))
        out = self.project(x * sa)
        return (out, (ca, sa)) if return_attention else out


class PHF(nn.Module):
    """Inject a (possibly coarser) deep map into a shallow one, residually.

    ``out = shallow + out_proj(mix([shallow, proj(up(deep))]))``; zeroing
    ``out_proj`` reduces the block to the identity on ``shallow``.
    """

    def __init__(self, shallow_channels, deep_channels):
        super().__init__()
        self.project = conv1x1(deep_channels, shallow_channels)
        self.mix = nn.Sequential(conv3x3(2 * shallow_channels, shallow_channels), nn.LeakyReLU(0.2))
        self.out_proj = conv1x1(shallow_channels, shallow_channels)

    def forward(self, shallow, deep):
        if shallow.shape[0] != deep.shape[0]:
            raise InvalidInputError("PHF: batch sizes differ")
        d = self.project(resize_to(deep, shallow.shape[-2:]))
        return shallow + self.out_proj(self.mix(torch.cat([shallow, d], dim=1)))


class Encoder(nn.Module):
    """SFE -> AFM on levels 1-2, backbone -> CAM on levels 3-6, then
    ``F^f = PHF(F^1, PHF(F^2, F^3))``."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.base_channels
        self.cfg = cfg
        self.sfe = nn.ModuleDict({"vi": SFE(cfg.in_channels_vi, c), "ir": SFE(cfg.in_channels_ir, c)})
        self.afm = nn.ModuleList([AFM(c), AFM(c)])
        self.backbone = nn.ModuleDict({"vi": Backbone(cfg), "ir": Backbone(cfg)})
        self.cam = nn.ModuleList([CAM(w) for w in cfg.level_channels])
        self.phf = nn.ModuleList([PHF(c, cfg.level_channels[0]), PHF(c, c)])

    def forward(self, vi, ir) -> FeaturePyramid:
        if vi.shape[0] != ir.shape[0] or vi.shape[-2:] != ir.shape[-2:]:
            raise InvalidInputError(f"unregistered inputs {tuple(vi.shape)} / {tuple(ir.shape)}")
        v1, v2 = self.sfe["vi"](vi)
        i1, i2 = self.sfe["ir"](ir)
        levels = {1: self.afm[0](v1, i1), 2: self.afm[1](v2, i2)}
        deep_vi = self.backbone["vi"](v2)
        deep_ir = self.backbone["ir"](i2)
        for k, level in enumerate(range(3, 7)):
            levels[level] = self.cam[k](deep_vi[level], deep_ir[level])
        fused = self.phf[1](levels[1], self.phf[0](levels[2], levels[3]))
        return FeaturePyramid(levels, fused)
