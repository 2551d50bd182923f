"""Lossless byte-stream codecs for exponent shards.

Two backends ship by default:

* ``order0`` (id 0): a static order-0 range coder with a sparse,
  quantized frequency table.  Its output size tracks the order-0
  Shannon entropy of the input to within the table overhead, which is
  what makes entropy-bound properties testable without external
  libraries.
* ``zlib`` (id 1): the stdlib dictionary compressor, standing in for
  whatever general-purpose codec a deployment would pick.

Backends are registered by id; compressed shards travel as
:class:`EChunk` values carrying the codec id, the uncompressed length
and a CRC32 of the original bytes.
"""

from __future__ import annotations

import struct
import zlib
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .bitfield import Bf16Buffer, EShard, decompose, measure_entropy
from .errors import CodecError, CorruptionError, UnsupportedCodecError

_RC_MASK = 0xFFFFFFFF
_RC_TOP = 1 << 24
_RC_BOT = 1 << 16
_MODEL_TOTAL = 1 << 14


def _quantize_counts(counts: np.ndarray) -> np.ndarray:
    """Scale a byte histogram so positive entries sum to _MODEL_TOTAL.

    Every observed symbol keeps frequency >= 1 (largest-remainder
    rounding); unobserved symbols stay at 0.
    """
    freqs = np.zeros(256, dtype=np.int64)
    nz = np.flatnonzero(counts)
    ideal = counts[nz] * (_MODEL_TOTAL / counts[nz].sum())
    q = np.maximum(1, np.floor(ideal).astype(np.int64))
    diff = _MODEL_TOTAL - int(q.sum())
    if diff > 0:
        order = np.argsort(-(ideal - np.floor(ideal)), kind="stable")
        q[order[: diff % len(nz)]] += 1
        q += diff // len(nz)
    while diff < 0:
        # forced floors of 1 can overshoot on near-uniform tiny inputs
        i = int(np.argmax(q))
        take = min(-diff, int(q[i]) - 1)
        q[i] -= take
        diff += take
    freqs[nz] = q
    return freqs


_DENSE_TABLE = 257  # sentinel symbol count: full 256-entry frequency table


def _order0_encode(data: bytes) -> bytes:
    if not data:
        return struct.pack("<IH", 0, 0)
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    freqs = _quantize_counts(counts)
    symbols = np.flatnonzero(freqs)
    if len(symbols) > 170:
        # dense table is cheaper than (symbol, freq) pairs past this point
        header = bytearray(struct.pack("<IH", len(data), _DENSE_TABLE))
        header += freqs.astype("<u2").tobytes()
    else:
        header = bytearray(struct.pack("<IH", len(data), len(symbols)))
        for s in symbols:
            header += struct.pack("<BH", int(s), int(freqs[s]))

    cum = np.zeros(257, dtype=np.int64)
    np.cumsum(freqs, out=cum[1:])
    cum_of = cum[:-1]

    low = 0
    rng = _RC_MASK
    out = bytearray()
    for s in data:
        r = rng // _MODEL_TOTAL
        low = (low + r * int(cum_of[s])) & _RC_MASK
        rng = r * int(freqs[s])
        while True:
            if (low ^ (low + rng)) < _RC_TOP:
                pass
            elif rng < _RC_BOT:
                rng = (-low) & (_RC_BOT - 1)
            else:
                break
            out.append((low >> 24) & 0xFF)
            low = (low << 8) & _RC_MASK
            rng = (rng << 8) & _RC_MASK
    for _ in range(4):
        out.append((low >> 24) & 0xFF)
        low = (low << 8) & _RC_MASK
    return bytes(header) + bytes(out)


def _order0_decode(data: bytes, expected_len: int | None = None) -> bytes:
    if len(data) < 6:
        raise CorruptionError("order0 stream shorter than its fixed header")
    n_bytes, n_symbols = struct.unpack_from("<IH", data, 0)
    if expected_len is not None and n_bytes != expected_len:
        raise CorruptionError(
            f"order0 stream claims {n_bytes} bytes, expected {expected_len}"
        )
    if n_symbols > 256 and n_symbols != _DENSE_TABLE:
        raise CorruptionError("order0 stream declares an impossible symbol count")
    pos = 6
    symbols = []
    cum = [0]
    if n_symbols == _DENSE_TABLE:
        if len(data) < pos + 512:
            raise CorruptionError("order0 frequency table truncated")
        freqs = np.frombuffer(data, dtype="<u2", count=256, offset=pos)
        pos += 512
        for sym in np.flatnonzero(freqs):
            symbols.append(int(sym))
            cum.append(cum[-1] + int(freqs[sym]))
        n_symbols = len(symbols)
    else:
        if len(data) < pos + 3 * n_symbols:
            raise CorruptionError("order0 frequency table truncated")
        for _ in range(n_symbols):
            sym, freq = struct.unpack_from("<BH", data, pos)
            pos += 3
            symbols.append(sym)
            cum.append(cum[-1] + freq)
    if n_bytes == 0:
        return b""
    if n_symbols == 0 or cum[-1] != _MODEL_TOTAL:
        raise CorruptionError("order0 frequency table does not sum to the model total")

    payload = data[pos:]
    plen = len(payload)
    code = int.from_bytes(payload[:4].ljust(4, b"\0"), "big")
    ppos = 4
    low = 0
    rng = _RC_MASK
    out = bytearray(n_bytes)
    for i in range(n_bytes):
        r = rng // _MODEL_TOTAL
        value = min((code - low) // r, _MODEL_TOTAL - 1)
        idx = bisect_right(cum, value) - 1
        out[i] = symbols[idx]
        low = (low + r * cum[idx]) & _RC_MASK
        rng = r * (cum[idx + 1] - cum[idx])
        while True:
            if (low ^ (low + rng)) < _RC_TOP:
                pass
            elif rng < _RC_BOT:
                rng = (-low) & (_RC_BOT - 1)
            else:
                break
            b = payload[ppos] if ppos < plen else 0
            ppos += 1
            code = ((code << 8) | b) & _RC_MASK
            low = (low << 8) & _RC_MASK
            rng = (rng << 8) & _RC_MASK
    return bytes(out)


class Order0Codec:
    """Static order-0 range coder, self-delimiting streams."""

    codec_id = 0
    name = "order0"

    def compress(self, data: bytes) -> bytes:
        return _order0_encode(data)

    def decompress(self, data: bytes, expected_len: int | None = None) -> bytes:
        return _order0_decode(data, expected_len)


class ZlibCodec:
    """Adapter over the stdlib zlib compressor."""

    codec_id = 1
    name = "zlib"

    def __init__(self, level: int = 6):
        self.level = level

    def compress(self, data: bytes) -> bytes:
        return zlib.compress(data, self.level)

    def decompress(self, data: bytes, expected_len: int | None = None) -> bytes:
        try:
            out = zlib.decompress(data)
        except zlib.error as exc:
            raise CorruptionError(f"zlib stream failed to decode: {exc}") from exc
        if expected_len is not None and len(out) != expected_len:
            raise CorruptionError(
                f"zlib stream decoded to {len(out)} bytes, expected {expected_len}"
            )
        return out


_REGISTRY: dict[int, object] = {}
_BY_NAME: dict[str, object] = {}


def register_backend(codec) -> None:
    _REGISTRY[codec.codec_id] = codec
    _BY_NAME[codec.name] = codec


def backend_by_id(codec_id: int):
    try:
        return _REGISTRY[codec_id]
    except KeyError:
        raise UnsupportedCodecError(
            f"no codec registered under id {codec_id}", codec_id=codec_id
        ) from None


def backend_by_name(name: str):
    try:
        return _BY_NAME[name]
    except KeyError:
        raise UnsupportedCodecError(f"no codec registered under name {name!r}") from None


def backend_names() -> list[str]:
    return sorted(_BY_NAME)


register_backend(Order0Codec())
register_backend(ZlibCodec())


@dataclass(frozen=True)
class EChunk:
    """A compressed E shard plus enough metadata to verify it."""

    payload: bytes
    codec_id: int
    uncompressed_len: int
    checksum: int  # CRC32 of the uncompressed shard bytes


def compress_shard(shard: EShard, backend) -> EChunk:
    if not shard.data:
        raise ValueError("cannot compress an empty shard")
    try:
        payload = backend.compress(shard.data)
    except Exception as exc:
        raise CodecError(
            f"backend {backend.name!r} failed: {exc}", codec_id=backend.codec_id
        ) from exc
    return EChunk(
        payload=payload,
        codec_id=backend.codec_id,
        uncompressed_len=len(shard.data),
        checksum=zlib.crc32(shard.data),
    )


def decompress_chunk(chunk: EChunk) -> bytes:
    """Decode a chunk and verify its length and CRC.

    Pure; safe to call concurrently on distinct chunks.
    """
    backend = backend_by_id(chunk.codec_id)
    data = backend.decompress(chunk.payload, expected_len=chunk.uncompressed_len)
    if len(data) != chunk.uncompressed_len:
        raise CorruptionError(
            f"chunk decoded to {len(data)} bytes, expected {chunk.uncompressed_len}"
        )
    if zlib.crc32(data) != chunk.checksum:
        raise CorruptionError("chunk checksum mismatch after decompression")
    return data


def compression_report(tensors: list[Bf16Buffer], backend, shard_count: int = 1) -> dict:
    """Measure how well the exponent streams of ``tensors`` compress.

    Returns ``rho`` (compressed / raw exponent bytes), ``total_ratio``
    (whole-tensor ratio: SM bytes are stored raw and are half the
    footprint, so ``0.5 + 0.5 * rho``) and the order-0 entropy of the
    combined exponent stream.
    """
    if not tensors:
        raise ValueError("compression_report needs at least one tensor")
    raw = 0
    compressed = 0
    exponent_stream = bytearray()
    for tensor in tensors:
        _, shards = decompose(tensor, shard_count)
        for shard in shards:
            raw += len(shard.data)
            compressed += len(compress_shard(shard, backend).payload)
            exponent_stream += shard.data
    rho = compressed / raw
    return {
        "rho": rho,
        "total_ratio": 0.5 + 0.5 * rho,
        "entropy": measure_entropy(bytes(exponent_stream)),
    }
