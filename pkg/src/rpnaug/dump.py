"""Binary tensor dumps and the JSON-lines augmentation trace.

Layout, all little-endian::

    8 bytes   magic  b"RPNTENSR"
    uint32    format version (1)
    uint32    rank (1..3)
    uint64    one extent per axis
    float64   row-major payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from rpnaug.errors import DataError, ParseError

MAGIC = b"RPNTENSR"
VERSION = 1


def encode_tensor(arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    if not 1 <= arr.ndim <= 3:
        raise ValueError(f"dumps hold rank 1..3 tensors, got shape {arr.shape}")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise ParseError("tensor dump: bad magic", location=0)
    offset = len(MAGIC)
    if len(buf) < offset + 8:
        raise ParseError(f"tensor dump truncated at byte {len(buf)}", location=len(buf))
    version, rank = struct.unpack_from("<II", buf, offset)
    if version != VERSION:
        raise ParseError(f"tensor dump: unsupported version {version} at byte {offset}", location=offset)
    if not 1 <= rank <= 3:
        raise ParseError(f"tensor dump: rank {rank} at byte {offset + 4}", location=offset + 4)
    offset += 8
    if len(buf) < offset + 8 * rank:
        raise ParseError(f"tensor dump truncated in shape at byte {len(buf)}", location=len(buf))
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    if 0 in shape:
        raise ParseError(f"tensor dump: zero extent in shape {shape} at byte {offset}", location=offset)
    offset += 8 * rank
    expected = offset + 8 * int(np.prod(shape))
    if len(buf) != expected:
        where = min(len(buf), expected)
        raise ParseError(f"tensor dump: payload should end at byte {expected}, file has {len(buf)} bytes",
                         location=where)
    return np.frombuffer(buf, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)


def write_tensor(path, arr):
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"tensor dump not found: {path}")
    return decode_tensor(path.read_bytes())


def write_trace(path, steps):
    """One JSON object per noise step: step index, mask density, permutation."""
    with open(path, "w", encoding="utf-8") as fh:
        for t, step in enumerate(steps, start=1):
            record = {"step": t, "mask_density": float(step.mask.mean()),
                      "scope": step.scope, "permutation": step.perm.tolist()}
            fh.write(json.dumps(record) + "\n")
