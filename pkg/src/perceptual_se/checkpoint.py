"""MFCK checkpoint container.

Layout (all integers little-endian):

    b"MFCK"  u32 version
    u32 header length, UTF-8 JSON header (topology text, epoch, config hash,
        RNG state, optimizer step counts, free-form metadata)
    u32 tensor count, then per tensor:
        u16 name length, name, u8 ndim, u32 dims..., float32 data
    b"KCFM"  end marker (detects truncation at a tensor boundary)

Model parameters and buffers are stored under their dotted names with a
``<group>/`` prefix; optimizer moments under ``opt.m/`` and ``opt.v/``.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"MFCK"
END = b"KCFM"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    topology: dict = field(default_factory=dict)          # group -> topology text
    tensors: OrderedDict = field(default_factory=OrderedDict)
    epoch: int = 0
    config_hash: str = ""
    rng_state: Optional[dict] = None
    optimizer_steps: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add_module(self, group: str, module) -> None:
        self.topology[group] = module.topology()
        if hasattr(module, "init_args"):
            self.meta.setdefault("init_args", {})[group] = module.init_args
        for name, arr in module.state_dict().items():
            self.tensors[f"{group}/{name}"] = np.asarray(arr)

    def add_optimizer(self, state) -> None:
        for name in state.m:
            self.tensors[f"opt.m/{name}"] = state.m[name]
            self.tensors[f"opt.v/{name}"] = state.v[name]
        self.optimizer_steps = dict(state.t)

    def group(self, group: str) -> OrderedDict:
        prefix = group + "/"
        return OrderedDict((k[len(prefix):], v) for k, v in self.tensors.items() if k.startswith(prefix))

    def restore(self, group: str, module) -> None:
        """Load a group into ``module``; topology and every tensor name/shape must match."""
        if group not in self.topology:
            raise CheckpointError(f"checkpoint has no {group!r} group (has {sorted(self.topology)})")
        if self.topology[group] != module.topology():
            raise CheckpointError(f"{group}: topology mismatch: checkpoint {self.topology[group]!r} "
                                  f"vs model {module.topology()!r}")
        stored = self.group(group)
        own = module.state_dict()
        for name, arr in own.items():
            if name not in stored:
                raise CheckpointError(f"{group}: first mismatched tensor {name!r} (missing from checkpoint)")
            if stored[name].shape != arr.shape:
                raise CheckpointError(f"{group}: first mismatched tensor {name!r}: "
                                      f"shape {stored[name].shape} vs {arr.shape}")
        extra = [k for k in stored if k not in own]
        if extra:
            raise CheckpointError(f"{group}: first mismatched tensor {extra[0]!r} (not in model)")
        module.load_state_dict(stored)


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    arr = np.asarray(arr)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"topology": ckpt.topology, "epoch": ckpt.epoch, "config_hash": ckpt.config_hash,
                         "rng_state": ckpt.rng_state, "optimizer_steps": ckpt.optimizer_steps,
                         "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        _write_tensor(buf, name, arr)
    buf.write(END)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an MFCK checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported (expected {VERSION})")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.take(4) != END:
        raise CheckpointError(f"{path}: missing end marker")
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes after end marker")
    return Checkpoint(header["topology"], tensors, header["epoch"], header["config_hash"], header["rng_state"],
                      header["optimizer_steps"], header["meta"])


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    return from_bytes(path.read_bytes(), path)
