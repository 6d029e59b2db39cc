"""Configuration dataclasses, presets, and the sectioned ``key = value`` file format.

A config file has up to four sections::

    [data]
    num_classes = 4
    [net]
    base_channels = 16
    [train]
    lr = 0.01
    [loss]
    alpha = 0.8

Overrides use ``section.key=value`` and are applied after the file.
"""
from __future__ import annotations

import ast
import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from mafs.errors import ConfigError


@dataclass
class NetConfig:
    base_channels: int = 64
    backbone: str = "tiny"  # "tiny" | "resnet152"
    level_channels: tuple = (64, 128, 256, 256)  # widths of levels 3..6
    num_inn_units: int = 3
    rho_clamp: float = 2.0
    head_channels: int = 128
    mst_heads: int = 4
    mst_stages: int = 3
    pos_embed: bool = True
    in_channels_vi: int = 3
    in_channels_ir: int = 1
    num_classes: int = 9

    def validate(self) -> "NetConfig":
        if self.base_channels < 8:
            raise ConfigError("net.base_channels must be >= 8")
        if self.backbone not in ("tiny", "resnet152"):
            raise ConfigError(f"net.backbone must be 'tiny' or 'resnet152', got {self.backbone!r}")
        if len(self.level_channels) != 4 or any(int(c) <= 0 for c in self.level_channels):
            raise ConfigError("net.level_channels needs four positive widths (levels 3..6)")
        if self.base_channels % 2:
            raise ConfigError("net.base_channels must be even (coupling halves)")
        if self.head_channels % self.mst_heads:
            raise ConfigError("net.head_channels must be divisible by net.mst_heads")
        if self.num_inn_units < 1 or self.mst_stages < 1:
            raise ConfigError("net.num_inn_units and net.mst_stages must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("net.num_classes must be >= 2")
        self.level_channels = tuple(int(c) for c in self.level_channels)
        return self


@dataclass
class TrainConfig:
    stage1_epochs: int = 100
    stage2_epochs: int = 400
    batch_size: int = 4
    lr: float = 1e-3
    lr_decay: float = 0.98  # multiplicative, per epoch
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    crop: int = 256
    augment: bool = True
    mask_patch: int = 32
    mask_ratio: float = 0.0  # 0 -> random per sample in mask_ratio_range
    mask_ratio_range: tuple = (0.25, 0.75)
    max_steps: int = 0  # 0 -> no cap; otherwise stop after this many steps
    teacher_epochs: int = 200
    teacher_lr: float = 3e-3
    teacher_width: int = 32
    teacher_target_acc: float = 0.9
    log_every: int = 1

    def validate(self) -> "TrainConfig":
        for name in ("stage1_epochs", "stage2_epochs", "batch_size", "crop", "mask_patch", "teacher_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.lr <= 0 or self.teacher_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("train.lr_decay must lie in (0, 1]")
        lo, hi = self.mask_ratio_range
        if not 0 < lo <= hi < 1:
            raise ConfigError("train.mask_ratio_range must satisfy 0 < low <= high < 1")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError("train.mask_ratio must be 0 (random) or lie in (0, 1)")
        return self


@dataclass
class LossConfig:
    rec_alpha1: float = 5.0
    rec_alpha2: float = 5.0
    kd_temperature: float = 4.0
    kd_t2_scale: bool = True
    alpha: float = 0.8
    dwa_temperature: float = 500.0
    dwa_on_raw: bool = False
    weighting: str = "dwa"  # "dwa" | "equal"
    fair_first: bool = True  # apply alpha-fairness before the task weights
    ohem_thresh: float = 0.7
    ohem_min_kept: int = 0  # 0 -> valid pixels // 16
    bce_weight_cap: float = 20.0
    sobel_norm: str = "l1"

    def validate(self) -> "LossConfig":
        if self.alpha >= 1:
            raise ConfigError("loss.alpha must be < 1")
        if self.weighting not in ("dwa", "equal"):
            raise ConfigError("loss.weighting must be 'dwa' or 'equal'")
        if self.kd_temperature <= 0 or self.dwa_temperature <= 0:
            raise ConfigError("temperatures must be positive")
        if self.sobel_norm not in ("l1", "l2"):
            raise ConfigError("loss.sobel_norm must be 'l1' or 'l2'")
        return self


@dataclass
class DataConfig:
    num_classes: int = 9
    ignore_index: int = 255
    size: int = 256  # synthetic scene side length

    def validate(self) -> "DataConfig":
        if self.num_classes < 2:
            raise ConfigError("data.num_classes must be >= 2")
        return self


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> "Config":
        self.data.validate()
        self.net.num_classes = self.data.num_classes
        self.net.validate()
        self.train.validate()
        self.loss.validate()
        return self

    def to_dict(self) -> dict:
        return {name: _to_plain(getattr(self, name)) for name in SECTIONS}


SECTIONS = ("data", "net", "train", "loss")


def _to_plain(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def preset(name: str = "desk") -> Config:
    """``full`` keeps the full-scale hyper-parameters; ``desk`` is a laptop-CPU scale-down."""
    if name == "full":
        cfg = Config(net=NetConfig(backbone="resnet152", level_channels=(256, 512, 1024, 2048)))
    elif name == "desk":
        cfg = Config(
            data=DataConfig(num_classes=4, size=64),
            net=NetConfig(base_channels=16, level_channels=(32, 48, 64, 64), head_channels=32, mst_heads=4),
            train=TrainConfig(
                stage1_epochs=20, stage2_epochs=60, batch_size=2, lr=0.01, crop=64, mask_patch=8,
                teacher_epochs=150, teacher_width=16, lr_decay=0.995,
            ),
        )
    else:
        raise ConfigError(f"unknown preset {name!r} (expected 'desk' or 'full')")
    return cfg.validate()


def _coerce(value: str, current: Any, key: str):
    if isinstance(current, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, str):
        return value.strip().strip('"').strip("'")
    try:
        parsed = ast.literal_eval(value.strip())
    except (ValueError, SyntaxError) as e:
        raise ConfigError(f"{key}: cannot parse {value!r}") from e
    if isinstance(current, tuple):
        if not isinstance(parsed, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(parsed)
    if isinstance(current, float) and isinstance(parsed, (int, float)) and not isinstance(parsed, bool):
        return float(parsed)
    if isinstance(current, int) and isinstance(parsed, int) and not isinstance(parsed, bool):
        return parsed
    raise ConfigError(f"{key}: expected {type(current).__name__}, got {value!r}")


def set_value(cfg: Config, dotted: str, value: str) -> None:
    if "." not in dotted:
        raise ConfigError(f"override {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    obj = getattr(cfg, section)
    if key not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(obj, key, _coerce(value, getattr(obj, key), dotted))


def load_config(path=None, overrides=(), base: str = "desk") -> Config:
    """Preset, then file, then ``section.key=value`` overrides, then ``MAFS_SEED``."""
    cfg = preset(base)
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        for section in parser.sections():
            for key, value in parser.items(section):
                set_value(cfg, f"{section}.{key}", value)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must be section.key=value")
        k, v = ov.split("=", 1)
        set_value(cfg, k.strip(), v)
    seed = os.environ.get("MAFS_SEED")
    if seed:
        try:
            cfg.train.seed = int(seed)
        except ValueError as e:
            raise ConfigError(f"MAFS_SEED must be an integer, got {seed!r}") from e
    return cfg.validate()


def dump_config(cfg: Config, path) -> None:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            lines.append(f"{k} = {v}")
        lines.append("")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines))


def net_config_from_dict(d: dict) -> NetConfig:
    known = {f.name for f in fields(NetConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown NetConfig fields {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return NetConfig(**kw).validate()


def replace(obj, **kw):
    return dataclasses.replace(obj, **kw)
