"""Unbiased compression operators with bit accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .models import DimensionMismatchError

COMPRESSOR_KINDS = ("identity", "rand_k")


def index_bit_width(d: int) -> int:
    return max(1, math.ceil(math.log2(d))) if d > 1 else 1


@dataclass(frozen=True)
class Compressor:
    kind: str
    d: int
    k: Optional[int] = None
    value_bits: int = 64
    index_bits: Optional[int] = None

    def __post_init__(self):
        if self.kind not in COMPRESSOR_KINDS:
            raise ValueError(f"unknown compressor kind: {self.kind}")
        if self.d < 1:
            raise ValueError("d must be at least 1")
        if self.kind == "rand_k" and (self.k is None or not 1 <= self.k <= self.d):
            raise ValueError(f"rand_k needs 1 <= k <= d, got k={self.k}, d={self.d}")
        if self.value_bits < 1:
            raise ValueError("value_bits must be positive")

    @classmethod
    def identity(cls, d: int, value_bits: int = 64) -> "Compressor":
        return cls(kind="identity", d=d, value_bits=value_bits)

    @classmethod
    def rand_k(cls, d: int, k: int, value_bits: int = 64, index_bits: Optional[int] = None) -> "Compressor":
        return cls(kind="rand_k", d=d, k=k, value_bits=value_bits, index_bits=index_bits)

    @property
    def bits_per_index(self) -> int:
        return self.index_bits if self.index_bits is not None else index_bit_width(self.d)

    @property
    def message_bits(self) -> int:
        """Bits of one compressed message; fixed for both kinds."""
        if self.kind == "identity":
            return self.value_bits * self.d
        return self.k * (self.value_bits + self.bits_per_index)

    @property
    def dense_bits(self) -> int:
        return self.value_bits * self.d


@dataclass
class CompressedMessage:
    """Dense payload when ``indices`` is None, otherwise ``(indices, values)`` pairs."""

    values: np.ndarray
    dim: int
    bit_cost: int
    indices: Optional[np.ndarray] = None

    @property
    def is_sparse(self) -> bool:
        return self.indices is not None


def _random_subset(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    # Partial Fisher-Yates: exactly k draws, the i-th uniform on [i, d).
    scratch = np.arange(d)
    picks = rng.integers(np.arange(k), d)
    for i, j in enumerate(picks):
        scratch[i], scratch[j] = scratch[j], scratch[i]
    return np.sort(scratch[:k])


def compress(c: Compressor, x: np.ndarray, rng: np.random.Generator) -> CompressedMessage:
    if x.ndim != 1 or x.shape[0] != c.d:
        raise DimensionMismatchError(f"compressor expects dimension {c.d}, got shape {x.shape}")
    if c.kind == "identity":
        return CompressedMessage(values=np.array(x, dtype=float), dim=c.d, bit_cost=c.message_bits)
    idx = _random_subset(c.d, c.k, rng)
    scale = c.d / c.k
    return CompressedMessage(values=scale * x[idx], dim=c.d, bit_cost=c.message_bits, indices=idx)


def decompress(msg: CompressedMessage, d: Optional[int] = None) -> np.ndarray:
    d = msg.dim if d is None else d
    if not msg.is_sparse:
        if msg.values.shape[0] != d:
            raise DimensionMismatchError(f"dense payload has {msg.values.shape[0]} entries, expected {d}")
        return msg.values.copy()
    if msg.indices.size and (msg.indices.min() < 0 or msg.indices.max() >= d):
        raise IndexError(f"payload index out of range for dimension {d}")
    out = np.zeros(d)
    out[msg.indices] = msg.values
    return out


def sparse_message(c: Compressor, indices: np.ndarray, values: np.ndarray) -> CompressedMessage:
    """Wrap an arbitrary sparse vector; bits are charged per stored entry."""
    cost = len(indices) * (c.value_bits + c.bits_per_index)
    return CompressedMessage(values=np.asarray(values, dtype=float), dim=c.d, bit_cost=cost, indices=np.asarray(indices))


def omega(c: Compressor) -> float:
    return 0.0 if c.kind == "identity" else c.d / c.k - 1.0


def expected_density(c: Compressor) -> float:
    return float(c.d if c.kind == "identity" else c.k)


def sent_components(c: Compressor) -> int:
    return c.d if c.kind == "identity" else c.k
