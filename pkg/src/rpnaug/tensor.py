"""Dense float64 tensors, the handful of kernels the package needs, and
counter-based random streams.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 and rank 1-3.
The kernels below check shapes strictly (no broadcasting) and refuse to
publish non-finite values.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from rpnaug.errors import ConfigError, DimensionError, NumericError, PermutationError

MAX_RANK = 3


def as_tensor(values, shape=None) -> np.ndarray:
    """Coerce ``values`` to a contiguous float64 tensor and validate it."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if not 1 <= arr.ndim <= MAX_RANK:
        raise DimensionError(f"tensor rank must be 1..{MAX_RANK}, got shape {arr.shape}")
    if any(extent <= 0 for extent in arr.shape):
        raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
    return _checked(arr, "as_tensor")


def _checked(arr: np.ndarray, kernel: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{kernel} produced non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return _checked(a @ b, "matmul")


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return _checked(np.multiply(a, b), "hadamard")


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(a))))


def check_permutation(perm, n: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.issubdtype(perm.dtype, np.integer):
        raise PermutationError(f"expected an integer permutation of length {n}, got {perm!r}")
    seen = np.zeros(n, dtype=bool)
    in_range = (perm >= 0) & (perm < n)
    if not in_range.all():
        raise PermutationError(f"permutation entries out of range 0..{n - 1}")
    seen[perm] = True
    if not seen.all():
        raise PermutationError("permutation is not a bijection")
    return perm


def permute_rows(a: np.ndarray, perm) -> np.ndarray:
    """Row ``i`` of the result is row ``perm[i]`` of ``a``."""
    if a.ndim != 2:
        raise DimensionError(f"permute_rows needs a rank-2 tensor, got shape {a.shape}")
    perm = check_permutation(perm, a.shape[0])
    return a[perm]


def inverse_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def bernoulli_mask(shape, epsilon: float, rng: "RngStream") -> np.ndarray:
    """0/1 float tensor, each entry independently 1 with probability ``epsilon``."""
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError(f"mask probability must lie in [0, 1], got {epsilon}")
    draws = rng.generator().random(shape)
    return (draws < epsilon).astype(np.float64)


def _key_bytes(part) -> bytes:
    if isinstance(part, str):
        raw = part.encode("utf-8")
        return b"s" + struct.pack("<I", len(raw)) + raw
    if isinstance(part, (int, np.integer)):
        return b"i" + int(part).to_bytes(16, "little", signed=True)
    raise TypeError(f"stream key parts must be str or int, got {type(part).__name__}")


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream named by ``(master_seed, stream_id)``.

    ``derive`` hashes a purpose tuple into a child stream id, so the stream
    used for, say, sample 17 at noise step 2 does not depend on batch order
    or on how many draws other streams made.  Draws come from a Philox
    counter-based generator keyed by both ids.
    """

    master_seed: int
    stream_id: int = 0

    def derive(self, *parts) -> "RngStream":
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream_id.to_bytes(8, "little"))
        for part in parts:
            h.update(_key_bytes(part))
        return RngStream(self.master_seed, int.from_bytes(h.digest(), "little"))

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        key = (self.master_seed & 0xFFFFFFFFFFFFFFFF) | (self.stream_id << 64)
        return np.random.Generator(np.random.Philox(key=key))
