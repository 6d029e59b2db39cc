"""Whole networks: the stage-I reconstruction net, the joint student and the teacher."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from mafs.config import NetConfig
from mafs.errors import ConfigError
from mafs.fusion_decoder import FusionDecoder, reconstruction_decoder
from mafs.net_core import Encoder
from mafs.seg_decoder import AuxOutputs, SegDecoder, conv_bn_relu


class Stage1Net(nn.Module):
    """Encoder plus the two-headed reconstruction decoder."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.de_rec = reconstruction_decoder(cfg.base_channels, cfg.num_inn_units, cfg.rho_clamp)

    def forward(self, vi, ir):
        """Returns ``(recon_ir, recon_vi_y)``."""
        pyr = self.encoder(vi, ir)
        rec_ir, rec_vi = self.de_rec(pyr.fused)
        return rec_ir, rec_vi


@dataclass
class JointOutput:
    fused: torch.Tensor  # B x 1 x H x W, in [0, 1]
    logits: torch.Tensor  # B x K x H x W
    aux: AuxOutputs


class JointNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.de_fus = FusionDecoder(cfg.base_channels, cfg.num_inn_units, cfg.rho_clamp)
        self.de_seg = SegDecoder(cfg)

    def forward(self, vi, ir, with_fusion=True, with_seg=True) -> JointOutput:
        pyr = self.encoder(vi, ir)
        fused = self.de_fus(pyr.fused) if with_fusion else None
        logits, aux = self.de_seg(pyr, vi.shape[-2:]) if with_seg else (None, None)
        return JointOutput(fused, logits, aux)


class TeacherNet(nn.Module):
    """Small three-level encoder-decoder for 3-channel images."""

    def __init__(self, num_classes: int, width: int = 32, in_channels: int = 3):
        super().__init__()
        w = width
        self.enc1 = nn.Sequential(conv_bn_relu(in_channels, w), conv_bn_relu(w, w))
        self.enc2 = nn.Sequential(nn.MaxPool2d(2, ceil_mode=True), conv_bn_relu(w, 2 * w), conv_bn_relu(2 * w, 2 * w))
        self.enc3 = nn.Sequential(nn.MaxPool2d(2, ceil_mode=True), conv_bn_relu(2 * w, 4 * w), conv_bn_relu(4 * w, 4 * w))
        self.dec2 = conv_bn_relu(6 * w, 2 * w)
        self.dec1 = conv_bn_relu(3 * w, w)
        self.head = nn.Conv2d(w, num_classes, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        up = nn.functional.interpolate
        d2 = self.dec2(torch.cat([e2, up(e3, size=e2.shape[-2:], mode="bilinear", align_corners=False)], 1))
        d1 = self.dec1(torch.cat([e1, up(d2, size=e1.shape[-2:], mode="bilinear", align_corners=False)], 1))
        return self.head(d1)


@dataclass
class TeacherConfig:
    num_classes: int
    width: int = 32
    in_channels: int = 3


class Teacher:
    """Frozen segmentation model mapping a 3-channel image to raw logits.

    Any ``nn.Module`` with that signature can be wrapped.
    """

    def __init__(self, module: nn.Module, num_classes: int, provenance: str = "builtin", config: dict | None = None):
        self.module = module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.num_classes = num_classes
        self.provenance = provenance
        self.config = config or {}

    @torch.no_grad()
    def __call__(self, img: torch.Tensor) -> torch.Tensor:
        self.module.eval()
        logits = self.module(img)
        if logits.shape[1] != self.num_classes:
            raise ConfigError(f"teacher produced {logits.shape[1]} classes, expected {self.num_classes}")
        return logits

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.module.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    @classmethod
    def builtin(cls, cfg: TeacherConfig) -> "Teacher":
        return cls(TeacherNet(cfg.num_classes, cfg.width, cfg.in_channels), cfg.num_classes, "builtin", asdict(cfg))
