"""Invertible (affine coupling) decoder turning fused features into a grayscale image."""
from __future__ import annotations

import torch
import torch.nn as nn

from mafs.errors import NumericError
from mafs.net_core import conv1x1, conv3x3


class CouplingNet(nn.Module):
    """conv - instance norm - leaky ReLU - conv; used for the shift/scale functions."""

    def __init__(self, channels, zero_init=False):
        super().__init__()
        self.body = nn.Sequential(
            conv3x3(channels, channels),
            nn.InstanceNorm2d(channels, affine=True),
            nn.LeakyReLU(0.2),
            conv3x3(channels, channels),
        )
        if zero_init:
            nn.init.zeros_(self.body[-1].weight)
            nn.init.zeros_(self.body[-1].bias)

    def forward(self, x):
        return self.body(x)


class InnUnit(nn.Module):
    """One coupling unit on a split feature map (fa, fb).

    forward:  fa' = fa + psi(fb);  fb' = fb * exp(s(fa')) + phi(fa')
    with the log-scale ``s = clamp * tanh(rho(.))`` kept bounded.
    """

    def __init__(self, channels, clamp=2.0, zero_init=False):
        super().__init__()
        if channels % 2:
            raise ValueError("coupling unit needs an even channel count")
        half = channels // 2
        self.clamp = clamp
        self.psi = CouplingNet(half, zero_init)
        self.rho = CouplingNet(half, zero_init)
        self.phi = CouplingNet(half, zero_init)

    def log_scale(self, fa):
        return self.clamp * torch.tanh(self.rho(fa))

    def forward(self, fa, fb, index=0):
        fa = fa + self.psi(fb)
        fb = fb * torch.exp(self.log_scale(fa)) + self.phi(fa)
        if not (torch.isfinite(fa).all() and torch.isfinite(fb).all()):
            raise NumericError(f"non-finite output in coupling unit {index}")
        return fa, fb

    def inverse(self, fa, fb):
        fb = (fb - self.phi(fa)) * torch.exp(-self.log_scale(fa))
        fa = fa - self.psi(fb)
        return fa, fb


class ResidualChannelAttention(nn.Module):
    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.body = nn.Sequential(conv3x3(channels, channels), nn.LeakyReLU(0.2), conv3x3(channels, channels))
        self.squeeze = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            conv1x1(channels, hidden),
            nn.ReLU(inplace=True),
            conv1x1(hidden, channels),
            nn.Sigmoid(),
        )

    def forward(self, x):
        r = self.body(x)
        return x + r * self.squeeze(r)


class FusionDecoder(nn.Module):
    """Chain of coupling units whose outputs are all concatenated (dense
    aggregation), merged by residual channel attention, then 3x3 conv + tanh
    per output head, rescaled to [0, 1].

    With ``zero_init`` every unit starts as the identity map; otherwise the
    instance-normalized subnets swamp the (small) encoder features at init.
    """

    def __init__(self, channels, num_units=3, clamp=2.0, out_heads=1, zero_init=True):
        super().__init__()
        self.channels = channels
        self.units = nn.ModuleList([InnUnit(channels, clamp, zero_init) for _ in range(num_units)])
        self.aggregate = conv1x1(num_units * channels, channels)
        self.attention = ResidualChannelAttention(channels)
        self.heads = nn.ModuleList([conv3x3(channels, 1) for _ in range(out_heads)])

    def features(self, ff):
        """Dense stream of unit outputs, ``B x (num_units*C) x H x W``."""
        x = ff
        outs = []
        for i, unit in enumerate(self.units):
            fa, fb = torch.chunk(x, 2, dim=1)
            fa, fb = unit(fa, fb, index=i)
            x = torch.cat([fa, fb], dim=1)
            outs.append(x)
        return torch.cat(outs, dim=1)

    def forward(self, ff):
        y = self.attention(self.aggregate(self.features(ff)))
        imgs = [(torch.tanh(head(y)) + 1.0) * 0.5 for head in self.heads]
        return imgs[0] if len(imgs) == 1 else imgs


def reconstruction_decoder(channels, num_units=3, clamp=2.0) -> FusionDecoder:
    """Stage-I decoder: fusion-decoder topology with infrared and visible-Y heads."""
    return FusionDecoder(channels, num_units, clamp, out_heads=2)
