"""Binary checkpoint format.

Layout (all integers little-endian):

    magic "LFCK" | u32 version (=1) | u32 step | u32 config length |
    config UTF-8 | u32 tensor count | tensors...

    tensor: u16 name length | name UTF-8 | u8 rank | u32 dim... |
            float32 payload (row-major)

Optimizer moment buffers travel in the same tensor table with names
suffixed ``.m`` / ``.v``.  Loading verifies magic, version and per-tensor
element counts and reproduces parameters bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"LFCK"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    version: int = VERSION
    step: int = 0
    config_text: str = ""
    params: dict = field(default_factory=dict)   # name -> float32 ndarray
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)


def _write_tensor(fh, name, array):
    data = np.ascontiguousarray(array, dtype="<f4")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", data.ndim))
    for dim in data.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(data.tobytes())


def save_checkpoint(ckpt: Checkpoint, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", ckpt.step))
        config_bytes = ckpt.config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        count = len(ckpt.params) + len(ckpt.opt_m) + len(ckpt.opt_v)
        fh.write(struct.pack("<I", count))
        for name, array in ckpt.params.items():
            _write_tensor(fh, name, array)
        for name, array in ckpt.opt_m.items():
            _write_tensor(fh, name + ".m", array)
        for name, array in ckpt.opt_v.items():
            _write_tensor(fh, name + ".v", array)


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedCheckpointError(f"unexpected end of file while reading {what}")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported version {version}")
        step, = struct.unpack("<I", _read_exact(fh, 4, "step"))
        config_len, = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config_text = _read_exact(fh, config_len, "config").decode("utf-8")
        count, = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        ckpt = Checkpoint(version=version, step=step, config_text=config_text)
        for _ in range(count):
            name_len, = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            rank, = struct.unpack("<B", _read_exact(fh, 1, f"rank of {name}"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, f"dim of {name}"))[0]
                for _ in range(rank))
            numel = int(np.prod(shape)) if shape else 1
            payload = _read_exact(fh, 4 * numel, f"payload of {name}")
            array = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
            if array.size != numel:
                raise TruncatedCheckpointError(f"tensor {name} element count mismatch")
            if name.endswith(".m"):
                ckpt.opt_m[name[:-2]] = array
            elif name.endswith(".v"):
                ckpt.opt_v[name[:-2]] = array
            else:
                ckpt.params[name] = array
        trailing = fh.read(1)
        if trailing:
            raise TruncatedCheckpointError("trailing bytes after last tensor")
    return ckpt
