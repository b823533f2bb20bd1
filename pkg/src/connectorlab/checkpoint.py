"""Versioned binary checkpoints.

Layout: magic string, format version (LE u32), entry count (LE u32), an
entry table of (name, dtype tag, rank, dims as LE u32), the raw
little-endian array payloads in table order, and a length-prefixed JSON
trailer carrying RNG state, stage history, and free-form metadata.
Save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

MAGIC = b"CONNLAB\x00"
VERSION = 1

_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _write_archive(path, arrays, trailer):
    names = sorted(arrays)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(names)))
        for name in names:
            arr = arrays[name]
            tag = _DTYPE_TAGS.get(np.dtype(arr.dtype))
            if tag is None:
                raise DataError(f"unsupported checkpoint dtype {arr.dtype} for {name}")
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for name in names:
            arr = arrays[name]
            fh.write(np.ascontiguousarray(arr).astype(
                _TAG_DTYPES[_DTYPE_TAGS[np.dtype(arr.dtype)]], copy=False).tobytes())
        blob = json.dumps(trailer, sort_keys=True).encode()
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def _read_archive(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DataError(f"{path} is not a checkpoint archive")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            tag, rank = struct.unpack("<BB", fh.read(2))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            entries.append((name, tag, dims))
        arrays = {}
        for name, tag, dims in entries:
            dt = _TAG_DTYPES[tag]
            n = int(np.prod(dims)) if dims else 1
            buf = fh.read(n * dt.itemsize)
            if len(buf) != n * dt.itemsize:
                raise DataError(f"truncated payload for {name} in {path}")
            arrays[name] = np.frombuffer(buf, dtype=dt).reshape(dims).copy()
        (tlen,) = struct.unpack("<Q", fh.read(8))
        trailer = json.loads(fh.read(tlen).decode())
    return arrays, trailer


@dataclass
class Checkpoint:
    params: dict
    moments_m: dict = field(default_factory=dict)
    moments_v: dict = field(default_factory=dict)
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    stage_history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def save(self, path):
        arrays = {f"param.{k}": v for k, v in self.params.items()}
        arrays.update({f"adam_m.{k}": v for k, v in self.moments_m.items()})
        arrays.update({f"adam_v.{k}": v for k, v in self.moments_v.items()})
        trailer = {"step": self.step, "rng_state": self.rng_state,
                   "stage_history": self.stage_history, "meta": self.meta}
        _write_archive(path, arrays, trailer)

    @classmethod
    def load(cls, path):
        arrays, trailer = _read_archive(path)
        params, mm, mv = {}, {}, {}
        for k, v in arrays.items():
            kind, _, name = k.partition(".")
            {"param": params, "adam_m": mm, "adam_v": mv}[kind][name] = v
        return cls(params=params, moments_m=mm, moments_v=mv,
                   step=trailer["step"], rng_state=trailer["rng_state"],
                   stage_history=trailer["stage_history"], meta=trailer["meta"])
