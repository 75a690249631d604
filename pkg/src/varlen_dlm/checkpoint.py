"""Versioned binary checkpoint format.

All integers and floats are little-endian. Layout::

    magic          4 bytes   b"VLDM"
    version        u16       FORMAT_VERSION
    config         7 x i64   vocab_size, dim, n_layers, n_heads,
                             max_positions, seed, mlp_ratio
    step           i64       optimizer steps taken
    metadata       u32 length + UTF-8 JSON
    n_tensors      u32
    tensor * n     u16 name length, UTF-8 name,
                   u8 dtype code (0 = float32, 1 = float64, 2 = int64),
                   u8 ndim, ndim x u32 shape, raw little-endian data
    crc32          u32       over every preceding byte

Tensors are written as model parameters in ``named_parameters`` order under
their own names, followed by optimizer moments named ``adam.<i>.exp_avg``,
``adam.<i>.exp_avg_sq`` and ``adam.<i>.step`` for parameter index ``i``.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import DiffusionTransformer, ModelConfig

MAGIC = b"VLDM"
FORMAT_VERSION = 1
_CONFIG_FIELDS = ("vocab_size", "dim", "n_layers", "n_heads", "max_positions", "seed", "mlp_ratio")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    optimizer: dict = field(default_factory=dict)
    step: int = 0
    metadata: dict = field(default_factory=dict)

    def build_model(self) -> DiffusionTransformer:
        model = DiffusionTransformer(self.config)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.params.items()})
        return model


def optimizer_tensors(optimizer: torch.optim.Optimizer, params) -> dict:
    out = {}
    for i, p in enumerate(params):
        state = optimizer.state.get(p)
        if not state:
            continue
        out[f"adam.{i}.exp_avg"] = state["exp_avg"].detach().numpy()
        out[f"adam.{i}.exp_avg_sq"] = state["exp_avg_sq"].detach().numpy()
        out[f"adam.{i}.step"] = np.asarray([float(state["step"])], dtype=np.float32)
    return out


def restore_optimizer(optimizer: torch.optim.Optimizer, params, tensors: dict) -> None:
    for i, p in enumerate(params):
        key = f"adam.{i}.exp_avg"
        if key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(tensors[f"adam.{i}.step"][0])),
            "exp_avg": torch.from_numpy(tensors[key].copy()),
            "exp_avg_sq": torch.from_numpy(tensors[f"adam.{i}.exp_avg_sq"].copy()),
        }


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    code = _CODES[arr.dtype]
    raw_name = name.encode()
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def save_checkpoint(model: DiffusionTransformer, optimizer, step: int, path, metadata=None) -> None:
    cfg = model.config
    named = list(model.named_parameters())
    tensors = {n: p.detach().cpu().numpy() for n, p in named}
    if optimizer is not None:
        tensors.update(optimizer_tensors(optimizer, [p for _, p in named]))
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    buf = bytearray(MAGIC)
    buf += struct.pack("<H", FORMAT_VERSION)
    buf += struct.pack("<7q", *(getattr(cfg, f) for f in _CONFIG_FIELDS))
    buf += struct.pack("<q", step)
    buf += struct.pack("<I", len(meta)) + meta
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        buf += _pack_tensor(name, arr)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 10:
        raise CheckpointError("checkpoint is truncated")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (crc,) = struct.unpack("<I", data[-4:]) if len(data) >= 4 else (None,)
    if crc != zlib.crc32(data[:-4]):
        raise CheckpointError("checkpoint is truncated or corrupted (crc mismatch)")
    config = ModelConfig(**dict(zip(_CONFIG_FIELDS, r.unpack("<7q"))))
    (step,) = r.unpack("<q")
    (meta_len,) = r.unpack("<I")
    metadata = json.loads(r.take(meta_len).decode())
    (n,) = r.unpack("<I")
    params, opt = {}, {}
    for _ in range(n):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
        arr = arr.astype(dt.newbyteorder("="))
        (opt if name.startswith("adam.") else params)[name] = arr
    if r.pos != len(data) - 4:
        raise CheckpointError("trailing bytes after tensor section")
    return Checkpoint(config, params, opt, step, metadata)
