"""BF16 bit-field decomposition and entropy analytics.

A BF16 word is, from the most significant bit down: 1 sign bit, 8
exponent bits, 7 mantissa bits.  Sign and mantissa bits are close to
random on trained weights while the exponent bytes are highly
redundant, so a tensor is split into

* one *SM chunk*: one byte per element, ``(sign << 7) | mantissa``,
  stored raw (it does not compress), and
* K *E shards*: contiguous, balanced slices of the exponent byte
  stream, each handed to a lossless codec independently.

All values, including NaN, Inf and subnormal bit patterns, are treated
as opaque 16-bit words; nothing here interprets them numerically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Bf16Buffer:
    """A tensor as raw little-endian BF16 words."""

    data: bytes

    def __post_init__(self):
        if len(self.data) % 2 != 0:
            raise ValueError("BF16 payload must be an even number of bytes")

    @property
    def count(self) -> int:
        return len(self.data) // 2

    def words(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype="<u2")

    @classmethod
    def from_words(cls, words) -> "Bf16Buffer":
        arr = np.asarray(words, dtype=np.uint16).astype("<u2")
        return cls(arr.tobytes())


@dataclass(frozen=True)
class SmChunk:
    """Sign+mantissa bytes, one per element: ``(sign << 7) | mantissa``."""

    data: bytes

    @property
    def count(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class EShard:
    """One contiguous slice of a tensor's exponent byte stream."""

    data: bytes
    shard_index: int


def decompose(tensor: Bf16Buffer, shard_count: int) -> tuple[SmChunk, list[EShard]]:
    """Split a tensor into its SM chunk and ``shard_count`` balanced E shards.

    The shards partition the exponent stream contiguously; their sizes
    differ by at most one byte.  The input is not modified.
    """
    if shard_count < 1:
        raise ValueError("shard_count must be >= 1")
    if shard_count > tensor.count:
        raise ValueError(
            f"shard_count {shard_count} exceeds element count {tensor.count}"
        )
    words = tensor.words()
    sm = (((words >> 8) & 0x80) | (words & 0x7F)).astype(np.uint8)
    exponents = ((words >> 7) & 0xFF).astype(np.uint8)
    shards = [
        EShard(part.tobytes(), i)
        for i, part in enumerate(np.array_split(exponents, shard_count))
    ]
    return SmChunk(sm.tobytes()), shards


def recompose(sm: SmChunk, exponent_bytes: bytes) -> Bf16Buffer:
    """Inverse of :func:`decompose`: rebuild BF16 words bit-exactly."""
    if sm.count != len(exponent_bytes):
        raise ValueError(
            f"SM chunk has {sm.count} elements but exponent stream has "
            f"{len(exponent_bytes)} bytes"
        )
    s = np.frombuffer(sm.data, dtype=np.uint8).astype(np.uint16)
    e = np.frombuffer(exponent_bytes, dtype=np.uint8).astype(np.uint16)
    words = ((s & 0x80) << 8) | (e << 7) | (s & 0x7F)
    return Bf16Buffer.from_words(words)


def shard_spans(element_count: int, shard_count: int) -> list[tuple[int, int]]:
    """(offset, length) of each E shard within the exponent stream."""
    base, extra = divmod(element_count, shard_count)
    spans = []
    offset = 0
    for i in range(shard_count):
        length = base + (1 if i < extra else 0)
        spans.append((offset, length))
        offset += length
    return spans


def measure_entropy(data: bytes) -> float:
    """Order-0 Shannon entropy of a byte stream, in bits per byte."""
    if not data:
        raise ValueError("entropy of an empty stream is undefined")
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    p = counts[counts > 0] / len(data)
    return float(-(p * np.log2(p)).sum())
