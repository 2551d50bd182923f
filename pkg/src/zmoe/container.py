"""On-disk container for compressed experts.

One file holds every expert of a model.  All integers are
little-endian.  Layout, pinned for version 1:

    magic            4s   "ZMOE"
    version          u16
    num_experts      u32
    tensors_per_expert u16
    shard_count      u16   (E shards per tensor)
    codec_id         u8
    per expert, sorted by (layer, expert_id):
        layer        u32
        expert_id    u32
        per tensor, by tensor_index:
            element_count   u64
            sm_offset       u64
            e_chunk_offsets shard_count x u64
            e_chunk_lengths shard_count x u64
            sm_crc          u32

The data region follows the header.  SM regions are raw bytes
(element_count of them, CRC32 in the header).  Each E-chunk cell is
``u64 uncompressed_len + u32 crc32 + payload``; the header length
covers the whole cell.  Offsets are absolute and regions never
overlap, so concurrent positional reads are safe.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field

from .bitfield import Bf16Buffer, SmChunk, decompose, recompose, shard_spans
from .codecs import EChunk, compress_shard, decompress_chunk
from .errors import CorruptionError, FormatError, NotFoundError

MAGIC = b"ZMOE"
VERSION = 1

_FIXED = struct.Struct("<4sHIHHB")
_EXPERT = struct.Struct("<II")
_CHUNK_CELL = struct.Struct("<QI")


@dataclass(frozen=True, order=True)
class ExpertKey:
    layer: int
    expert_id: int
    tensor_index: int = 0

    @property
    def expert(self) -> tuple[int, int]:
        return (self.layer, self.expert_id)


@dataclass(frozen=True)
class TensorRecord:
    element_count: int
    sm_offset: int
    e_chunk_offsets: tuple[int, ...]
    e_chunk_lengths: tuple[int, ...]
    sm_crc: int


@dataclass(frozen=True)
class ContainerHeader:
    version: int
    num_experts: int
    tensors_per_expert: int
    shard_count: int
    codec_id: int
    # (layer, expert_id) -> list of TensorRecord, tensor_index order
    records: dict = field(default_factory=dict)

    def record(self, key: ExpertKey) -> TensorRecord:
        tensors = self.records.get(key.expert)
        if tensors is None:
            raise NotFoundError(f"expert {key.expert} not in container")
        if not 0 <= key.tensor_index < len(tensors):
            raise NotFoundError(
                f"tensor index {key.tensor_index} out of range for expert {key.expert}"
            )
        return tensors[key.tensor_index]

    def to_json_dict(self) -> dict:
        return {
            "magic": MAGIC.decode(),
            "version": self.version,
            "num_experts": self.num_experts,
            "tensors_per_expert": self.tensors_per_expert,
            "shard_count": self.shard_count,
            "codec_id": self.codec_id,
            "experts": [
                {
                    "layer": layer,
                    "expert_id": expert_id,
                    "tensors": [
                        {
                            "element_count": r.element_count,
                            "sm_offset": r.sm_offset,
                            "e_chunk_offsets": list(r.e_chunk_offsets),
                            "e_chunk_lengths": list(r.e_chunk_lengths),
                            "sm_crc": r.sm_crc,
                        }
                        for r in tensors
                    ],
                }
                for (layer, expert_id), tensors in sorted(self.records.items())
            ],
        }


def _record_struct(shard_count: int) -> struct.Struct:
    return struct.Struct(f"<QQ{shard_count}Q{shard_count}QI")


def header_size(num_experts: int, tensors_per_expert: int, shard_count: int) -> int:
    per_tensor = _record_struct(shard_count).size
    return _FIXED.size + num_experts * (_EXPERT.size + tensors_per_expert * per_tensor)


def pack_container(
    experts: dict[ExpertKey, Bf16Buffer],
    shard_count: int,
    backend,
    path: str,
) -> ContainerHeader:
    """Compress and serialize a full expert map to ``path``.

    Every expert must provide the same tensor indices, and tensors at
    the same index must share their element count.
    """
    if not experts:
        raise ValueError("cannot pack an empty expert map")

    grouped: dict[tuple[int, int], dict[int, Bf16Buffer]] = {}
    for key, tensor in experts.items():
        grouped.setdefault(key.expert, {})[key.tensor_index] = tensor

    expert_ids = sorted(grouped)
    tensor_indices = sorted(grouped[expert_ids[0]])
    n = len(tensor_indices)
    if tensor_indices != list(range(n)):
        raise ValueError("tensor indices must form a contiguous range from 0")
    shapes = [grouped[expert_ids[0]][t].count for t in tensor_indices]
    for eid in expert_ids:
        if sorted(grouped[eid]) != tensor_indices:
            raise ValueError(f"expert {eid} has an inconsistent tensor count")
        for t in tensor_indices:
            if grouped[eid][t].count != shapes[t]:
                raise ValueError(
                    f"tensor {t} of expert {eid} has {grouped[eid][t].count} "
                    f"elements, expected {shapes[t]}"
                )

    offset = header_size(len(expert_ids), n, shard_count)
    record_fmt = _record_struct(shard_count)
    records: dict[tuple[int, int], list[TensorRecord]] = {}
    data = io.BytesIO()
    for eid in expert_ids:
        tensors = []
        for t in tensor_indices:
            tensor = grouped[eid][t]
            sm, shards = decompose(tensor, shard_count)
            sm_offset = offset
            data.write(sm.data)
            offset += len(sm.data)
            chunk_offsets = []
            chunk_lengths = []
            for shard in shards:
                chunk = compress_shard(shard, backend)
                cell = (
                    _CHUNK_CELL.pack(chunk.uncompressed_len, chunk.checksum)
                    + chunk.payload
                )
                chunk_offsets.append(offset)
                chunk_lengths.append(len(cell))
                data.write(cell)
                offset += len(cell)
            tensors.append(
                TensorRecord(
                    element_count=tensor.count,
                    sm_offset=sm_offset,
                    e_chunk_offsets=tuple(chunk_offsets),
                    e_chunk_lengths=tuple(chunk_lengths),
                    sm_crc=zlib.crc32(sm.data),
                )
            )
        records[eid] = tensors

    header = ContainerHeader(
        version=VERSION,
        num_experts=len(expert_ids),
        tensors_per_expert=n,
        shard_count=shard_count,
        codec_id=backend.codec_id,
        records=records,
    )

    with open(path, "wb") as fh:
        fh.write(
            _FIXED.pack(
                MAGIC, VERSION, len(expert_ids), n, shard_count, backend.codec_id
            )
        )
        for (layer, expert_id) in expert_ids:
            fh.write(_EXPERT.pack(layer, expert_id))
            for rec in records[(layer, expert_id)]:
                fh.write(
                    record_fmt.pack(
                        rec.element_count,
                        rec.sm_offset,
                        *rec.e_chunk_offsets,
                        *rec.e_chunk_lengths,
                        rec.sm_crc,
                    )
                )
        fh.write(data.getvalue())
    return header


def parse_header(raw: bytes) -> ContainerHeader:
    if len(raw) < _FIXED.size:
        raise FormatError("file shorter than the fixed header")
    magic, version, num_experts, n, shard_count, codec_id = _FIXED.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    record_fmt = _record_struct(shard_count)
    expected = header_size(num_experts, n, shard_count)
    if len(raw) < expected:
        raise FormatError("header truncated")
    pos = _FIXED.size
    records: dict[tuple[int, int], list[TensorRecord]] = {}
    for _ in range(num_experts):
        layer, expert_id = _EXPERT.unpack_from(raw, pos)
        pos += _EXPERT.size
        tensors = []
        for _ in range(n):
            fields = record_fmt.unpack_from(raw, pos)
            pos += record_fmt.size
            tensors.append(
                TensorRecord(
                    element_count=fields[0],
                    sm_offset=fields[1],
                    e_chunk_offsets=tuple(fields[2 : 2 + shard_count]),
                    e_chunk_lengths=tuple(fields[2 + shard_count : 2 + 2 * shard_count]),
                    sm_crc=fields[-1],
                )
            )
        records[(layer, expert_id)] = tensors
    return ContainerHeader(
        version=version,
        num_experts=num_experts,
        tensors_per_expert=n,
        shard_count=shard_count,
        codec_id=codec_id,
        records=records,
    )


class Container:
    """Immutable read handle; positional reads are thread-safe."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "rb")
        try:
            self._size = os.fstat(self._fh.fileno()).st_size
            head = self._pread(0, min(self._size, _FIXED.size))
            if len(head) < _FIXED.size:
                raise FormatError("file shorter than the fixed header")
            magic, _, num_experts, n, shard_count, _ = _FIXED.unpack(head)
            if magic != MAGIC:
                raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
            hsize = header_size(num_experts, n, shard_count)
            self.header = parse_header(self._pread(0, hsize))
        except BaseException:
            self._fh.close()
            raise

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _pread(self, offset: int, length: int) -> bytes:
        data = os.pread(self._fh.fileno(), length, offset)
        if len(data) != length:
            raise FormatError(
                f"short read at offset {offset}: wanted {length}, got {len(data)}"
            )
        return data

    def expert_keys(self) -> list[tuple[int, int]]:
        return sorted(self.header.records)

    def read_sm(self, key: ExpertKey) -> SmChunk:
        rec = self.header.record(key)
        data = self._pread(rec.sm_offset, rec.element_count)
        if zlib.crc32(data) != rec.sm_crc:
            raise CorruptionError(f"SM region of {key} fails its checksum")
        return SmChunk(data)

    def read_echunk(self, key: ExpertKey, shard_index: int) -> EChunk:
        rec = self.header.record(key)
        if not 0 <= shard_index < self.header.shard_count:
            raise NotFoundError(
                f"shard index {shard_index} out of range 0..{self.header.shard_count - 1}"
            )
        cell = self._pread(
            rec.e_chunk_offsets[shard_index], rec.e_chunk_lengths[shard_index]
        )
        if len(cell) < _CHUNK_CELL.size:
            raise FormatError("E-chunk cell shorter than its prefix")
        uncompressed_len, crc = _CHUNK_CELL.unpack_from(cell, 0)
        return EChunk(
            payload=cell[_CHUNK_CELL.size :],
            codec_id=self.header.codec_id,
            uncompressed_len=uncompressed_len,
            checksum=crc,
        )

    def reconstruct(self, layer: int, expert_id: int, tensor_index: int) -> Bf16Buffer:
        """Read, decompress and recompose one tensor (CRC-verified)."""
        key = ExpertKey(layer, expert_id, tensor_index)
        sm = self.read_sm(key)
        exponents = b"".join(
            decompress_chunk(self.read_echunk(key, s))
            for s in range(self.header.shard_count)
        )
        return recompose(sm, exponents)

    def reconstruct_all(self) -> dict[ExpertKey, Bf16Buffer]:
        out = {}
        for layer, expert_id in self.expert_keys():
            for t in range(self.header.tensors_per_expert):
                out[ExpertKey(layer, expert_id, t)] = self.reconstruct(
                    layer, expert_id, t
                )
        return out


def open_container(path: str) -> Container:
    return Container(path)


def inspect_json(path: str) -> str:
    with open_container(path) as c:
        return json.dumps(c.header.to_json_dict(), indent=2, sort_keys=True)


def expected_shard_length(element_count: int, shard_count: int, shard_index: int) -> int:
    return shard_spans(element_count, shard_count)[shard_index][1]
