"""Single-file checkpoint container.

Layout::

    b"MAFSCKPT" | u32 format version | u64 header length | JSON header | records

The header is sorted-key JSON holding the checkpoint kind, the serialized
NetConfig, free-form metadata and a record index (name, dtype, shape, offset,
byte length). Records are raw little-endian tensor bytes in index order, so
saving the same checkpoint twice yields identical files.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from mafs.errors import ConfigError

MAGIC = b"MAFSCKPT"
FORMAT_VERSION = 1

# module groups named by the two-stage schedule, keyed by state-dict prefix
GROUPS = {
    "SFE": "encoder.sfe.",
    "AFM": "encoder.afm.",
    "PHF": "encoder.phf.",
    "Backbone": "encoder.backbone.",
    "CAM": "encoder.cam.",
    "De_rec": "de_rec.",
    "De_fus": "de_fus.",
    "De_seg": "de_seg.",
}
ENCODER_GROUPS = ("SFE", "AFM", "PHF", "Backbone", "CAM")

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "uint8": torch.uint8,
    "bool": torch.bool,
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


def group_of(key: str) -> str | None:
    for name, prefix in GROUPS.items():
        if key.startswith(prefix):
            return name
    return None


@dataclass
class Checkpoint:
    kind: str  # "stage1" | "stage2" | "teacher"
    net_config: dict
    weights: dict
    optimizer: dict = field(default_factory=dict)
    rng: torch.Tensor | None = None
    meta: dict = field(default_factory=dict)

    def groups(self) -> set:
        return {g for g in (group_of(k) for k in self.weights) if g is not None}

    def subset(self, groups) -> dict:
        """State-dict entries belonging to the named module groups."""
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown module groups {sorted(unknown)}")
        prefixes = tuple(GROUPS[g] for g in groups)
        return {k: v for k, v in self.weights.items() if k.startswith(prefixes)}

    def check_net_config(self, expected: dict) -> None:
        expected = _jsonable(expected)
        if _jsonable(self.net_config) != expected:
            diff = {k for k in set(expected) | set(self.net_config) if expected.get(k) != self.net_config.get(k)}
            raise ConfigError(f"checkpoint NetConfig differs in {sorted(diff)}")

    # -- serialization ----------------------------------------------------

    def _records(self):
        recs = [(f"weights/{k}", v) for k, v in self.weights.items()]
        recs += [(f"optim/{k}", v) for k, v in self.optimizer.items()]
        if self.rng is not None:
            recs.append(("rng/torch", self.rng))
        return recs

    def to_bytes(self) -> bytes:
        index, blobs, offset = [], [], 0
        for name, t in self._records():
            t = t.detach().cpu().contiguous()
            if t.dtype not in _DTYPE_NAMES:
                raise ConfigError(f"cannot serialize dtype {t.dtype} for {name}")
            raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
            index.append(
                {"name": name, "dtype": _DTYPE_NAMES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)}
            )
            blobs.append(raw)
            offset += len(raw)
        header = {
            "kind": self.kind,
            "net_config": _jsonable(self.net_config),
            "meta": _jsonable(self.meta),
            "records": index,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hb)) + hb + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[: len(MAGIC)] != MAGIC:
            raise ConfigError("not a checkpoint file (bad magic)")
        pos = len(MAGIC)
        version, hlen = struct.unpack_from("<IQ", data, pos)
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint format version {version}")
        pos += struct.calcsize("<IQ")
        header = json.loads(data[pos : pos + hlen].decode())
        base = pos + hlen
        weights, optim, rng = {}, {}, None
        for rec in header["records"]:
            dtype = _DTYPES[rec["dtype"]]
            np_dtype = torch.empty(0, dtype=dtype).numpy().dtype.newbyteorder("<")
            start = base + rec["offset"]
            arr = np.frombuffer(data, dtype=np_dtype, count=int(np.prod(rec["shape"], dtype=np.int64)), offset=start)
            t = torch.from_numpy(arr.copy()).reshape(rec["shape"])
            kind, _, name = rec["name"].partition("/")
            if kind == "weights":
                weights[name] = t
            elif kind == "optim":
                optim[name] = t
            elif kind == "rng":
                rng = t
        return cls(header["kind"], header["net_config"], weights, optim, rng, header["meta"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise ConfigError(f"cannot read checkpoint {path}: {e}") from e
        return cls.from_bytes(data)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj
