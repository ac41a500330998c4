"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"BNCK"
    version u32      currently 1
    count   u32      number of entries
    entry*  count times:
        name_len u16, name utf-8 bytes
        kind     u8   0 = float32 tensor, 1 = packed sign bits, 2 = raw bytes
        ndim     u8
        dims     u32 * ndim            (logical shape; kind 2: (length,))
        kind 0:  prod(dims) float32 values
        kind 1:  words_per_row u32, row_bits u32,
                 dims[0]*words_per_row uint64 words
        kind 2:  dims[0] raw bytes

Kind-1 entries store BitTensors (used by frozen inference checkpoints:
packed weight bits + per-filter scales + the float layers' payloads);
kind-2 entries carry provenance metadata (config hash, genotype JSON).
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .errors import FormatError
from .tensorops import BitTensor

MAGIC = b"BNCK"
VERSION = 1


def save_checkpoint(path, entries: dict) -> None:
    """entries: name -> float ndarray or BitTensor.  Order is preserved."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(entries)))
        for name, value in entries.items():
            blob = name.encode("utf-8")
            f.write(struct.pack("<H", len(blob)))
            f.write(blob)
            if isinstance(value, BitTensor):
                dims = value.logical_shape
                f.write(struct.pack("<BB", 1, len(dims)))
                f.write(struct.pack(f"<{len(dims)}I", *dims))
                f.write(struct.pack("<II", value.words_per_row, value.row_bits))
                f.write(np.ascontiguousarray(value.words, dtype="<u8").tobytes())
            elif isinstance(value, (bytes, bytearray)):
                f.write(struct.pack("<BB", 2, 1))
                f.write(struct.pack("<I", len(value)))
                f.write(bytes(value))
            else:
                arr = np.ascontiguousarray(value, dtype="<f4")
                f.write(struct.pack("<BB", 0, arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.tobytes())


def _read_exact(f, size, path, what):
    data = f.read(size)
    if len(data) != size:
        raise FormatError(
            f"{path}: truncated while reading {what} at byte {f.tell() - len(data)}"
        )
    return data


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray | BitTensor]":
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path, "magic")
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(f, 8, path, "header"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        out: OrderedDict[str, np.ndarray | BitTensor] = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, path, "name length"))
            name = _read_exact(f, name_len, path, "name").decode("utf-8")
            kind, ndim = struct.unpack("<BB", _read_exact(f, 2, path, "entry header"))
            dims = struct.unpack(
                f"<{ndim}I", _read_exact(f, 4 * ndim, path, "dims")
            )
            if kind == 0:
                numel = int(np.prod(dims)) if ndim else 1
                raw = _read_exact(f, 4 * numel, path, f"payload of {name}")
                out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
            elif kind == 1:
                wpr, row_bits = struct.unpack(
                    "<II", _read_exact(f, 8, path, "bit header")
                )
                raw = _read_exact(f, 8 * dims[0] * wpr, path, f"bits of {name}")
                words = np.frombuffer(raw, dtype="<u8").reshape(dims[0], wpr).copy()
                out[name] = BitTensor(tuple(dims), words, row_bits)
            elif kind == 2:
                out[name] = _read_exact(f, dims[0], path, f"bytes of {name}")
            else:
                raise FormatError(f"{path}: unknown entry kind {kind} for {name}")
        return out
