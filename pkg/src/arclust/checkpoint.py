"""ARVC checkpoint container.

Layout: magic ``ARVC``, u16 version, u32 section count, then sections of
``u16 name length | name | u64 payload length | payload``.  Array sections
hold a u32 count followed by ``u16 name length | name | u8 dtype | u8 ndim |
u32 dims... | little-endian data`` records.  All integers are little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import ParseError

MAGIC = b"ARVC"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    opt: OptimizerState
    step: int  # number of completed optimizer steps

    @property
    def model_config(self):
        return self.config.model_config()


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        key = name.encode("utf-8")
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
        out.append(struct.pack("<H", len(key)) + key + struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def _unpack_arrays(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    arrays = {}
    for _ in range(r.take("<I")[0]):
        name = r.raw(r.take("<H")[0]).decode("utf-8")
        code, ndim = r.take("<BB")
        if code not in _DTYPES:
            raise ParseError(f"unknown dtype code {code} for array {name}")
        shape = r.take(f"<{ndim}I")
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.raw(count * dt.itemsize), dtype=dt).reshape(shape)
        arrays[name] = arr.astype(dt.newbyteorder("="))
    return arrays


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def take(self, fmt: str):
        return struct.unpack(fmt, self.raw(struct.calcsize(fmt)))


def to_bytes(ckpt: Checkpoint) -> bytes:
    sections = {
        "config": ckpt.config.to_text().encode("utf-8"),
        "params": _pack_arrays(ckpt.params),
        "adam_m": _pack_arrays(ckpt.opt.m),
        "adam_v": _pack_arrays(ckpt.opt.v),
        "optim": struct.pack("<Q", ckpt.opt.step),
        # substreams are keyed by (seed, step), so this pair is the full rng state
        "rng": struct.pack("<QQ", ckpt.config.seed, ckpt.step),
    }
    out = [MAGIC, struct.pack("<HI", VERSION, len(sections))]
    for name, payload in sections.items():
        key = name.encode("ascii")
        out.append(struct.pack("<H", len(key)) + key + struct.pack("<Q", len(payload)) + payload)
    return b"".join(out)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise ParseError("bad magic")
    r = _Reader(buf)
    r.raw(4)
    version, count = r.take("<HI")
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    sections = {}
    for _ in range(count):
        name = r.raw(r.take("<H")[0]).decode("ascii")
        sections[name] = r.raw(r.take("<Q")[0])
    if r.pos != len(buf):
        raise ParseError("trailing bytes after last section")
    missing = {"config", "params", "adam_m", "adam_v", "optim", "rng"} - sections.keys()
    if missing:
        raise ParseError(f"missing checkpoint sections: {sorted(missing)}")
    config = TrainConfig.from_text(sections["config"].decode("utf-8"))
    (opt_step,) = struct.unpack("<Q", sections["optim"])
    seed, step = struct.unpack("<QQ", sections["rng"])
    if seed != config.seed:
        raise ParseError("rng seed does not match config seed")
    opt = OptimizerState(_unpack_arrays(sections["adam_m"]), _unpack_arrays(sections["adam_v"]), opt_step)
    return Checkpoint(config, _unpack_arrays(sections["params"]), opt, step)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
