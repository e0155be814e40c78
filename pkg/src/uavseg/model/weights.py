"""Named-tensor weight store, initialization and the SEGW checkpoint format.

Layout (little-endian)::

    b"SEGW" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u8 rank | rank x u64 dim | float32 data )
    u32 crc32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .config import ModelConfig, parameter_shapes

MAGIC = b"SEGW"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class WeightStore(Dict[str, np.ndarray]):
    """Mapping from dotted parameter name to array."""

    def validate(self, cfg: ModelConfig) -> None:
        expected = dict(parameter_shapes(cfg))
        for name, shape in expected.items():
            if name not in self:
                raise ShapeMismatchError(f"missing tensor {name!r} (expected shape {shape})")
            if tuple(self[name].shape) != shape:
                raise ShapeMismatchError(
                    f"tensor {name!r} has shape {tuple(self[name].shape)}, config expects {shape}"
                )
        extra = [n for n in self if n not in expected]
        if extra:
            raise ShapeMismatchError(f"unexpected tensor {extra[0]!r} for this config")

    def astype(self, dtype) -> "WeightStore":
        return WeightStore({k: v.astype(dtype) for k, v in self.items()})

    def copy(self) -> "WeightStore":
        return WeightStore({k: v.copy() for k, v in self.items()})


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    # resample anything beyond two standard deviations
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def init_weights(cfg: ModelConfig, seed: Union[int, np.random.SeedSequence] = 0) -> WeightStore:
    """Truncated-normal (std 0.02) weights, zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for name, shape in parameter_shapes(cfg):
        is_norm = ".norm" in name or "fuse_norm" in name
        if name.endswith(".bias"):
            store[name] = np.zeros(shape, dtype=np.float32)
        elif is_norm:
            store[name] = np.ones(shape, dtype=np.float32)
        else:
            store[name] = _trunc_normal(rng, shape, 0.02)
    return store


def save_weights(path: Union[str, Path], store: WeightStore, cfg: Optional[ModelConfig] = None) -> None:
    if cfg is not None:
        store.validate(cfg)
    parts = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, arr in store.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    payload = b"".join(parts)
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path: Union[str, Path], cfg: Optional[ModelConfig] = None) -> WeightStore:
    """Read a checkpoint; with ``cfg`` every tensor shape is checked before returning."""
    buf = Path(path).read_bytes()
    rd = _Reader(buf)
    if rd.take(4, "magic") != MAGIC:
        raise BadMagicError(f"{path}: not a SEGW checkpoint")
    (version,) = rd.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (count,) = rd.unpack("<I", "tensor count")
    store = WeightStore()
    for _ in range(count):
        (nlen,) = rd.unpack("<I", "name length")
        name = rd.take(nlen, "tensor name").decode("utf-8")
        (rank,) = rd.unpack("<B", f"rank of {name}")
        shape = rd.unpack(f"<{rank}Q", f"dims of {name}")
        n = int(np.prod(shape)) if rank else 1
        data = rd.take(4 * n, f"data of {name}")
        store[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    payload_end = rd.pos
    (crc,) = rd.unpack("<I", "checksum")
    if rd.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - rd.pos} trailing bytes after checksum")
    if zlib.crc32(buf[:payload_end]) != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    if cfg is not None:
        store.validate(cfg)
    return store
