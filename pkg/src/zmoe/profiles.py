"""Profiled latency and shape constants driving scheduling and planning."""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class ExecutionProfile:
    """Per-deployment constants, normally measured offline.

    ``e_read_seconds`` defaults to ``compression_ratio * sm_read_seconds
    / shards_per_tensor``: the exponent stream is ``ratio`` times the SM
    stream and is read in ``shards_per_tensor`` pieces.  It can be set
    independently when measurements disagree with that model.
    """

    sm_read_seconds: float  # one SM chunk
    decompress_seconds: float  # one E shard on one worker
    compression_ratio: float  # compressed / raw exponent bytes, in (0, 1]
    shards_per_tensor: int
    workers: int
    tensors_per_expert: int = 1
    e_read_seconds: float | None = None  # one E chunk
    expert_exec_seconds: dict[int, float] = field(default_factory=dict)
    default_exec_seconds: float = 0.0
    recovery_seconds: float = 0.0
    consolidated_reads: bool = False  # E-chunk read fused into its decompress

    def __post_init__(self):
        if self.sm_read_seconds <= 0:
            raise ValueError("sm_read_seconds must be positive")
        if self.decompress_seconds <= 0:
            raise ValueError("decompress_seconds must be positive")
        if not 0 < self.compression_ratio <= 1:
            raise ValueError("compression_ratio must be in (0, 1]")
        if min(self.shards_per_tensor, self.workers, self.tensors_per_expert) < 1:
            raise ValueError("shards, workers and tensors_per_expert must be >= 1")
        if self.e_read_seconds is None:
            self.e_read_seconds = (
                self.compression_ratio * self.sm_read_seconds / self.shards_per_tensor
            )
        if self.e_read_seconds < 0 or self.recovery_seconds < 0:
            raise ValueError("read and recovery times cannot be negative")
        if any(p < 0 for p in self.expert_exec_seconds.values()) or (
            self.default_exec_seconds < 0
        ):
            raise ValueError("execution times cannot be negative")

    def exec_seconds(self, expert_id: int) -> float:
        return self.expert_exec_seconds.get(expert_id, self.default_exec_seconds)

    def to_json_dict(self) -> dict:
        return {
            "sm_read_seconds": self.sm_read_seconds,
            "e_read_seconds": self.e_read_seconds,
            "decompress_seconds": self.decompress_seconds,
            "compression_ratio": self.compression_ratio,
            "shards_per_tensor": self.shards_per_tensor,
            "workers": self.workers,
            "tensors_per_expert": self.tensors_per_expert,
            "expert_exec_seconds": {
                str(k): v for k, v in sorted(self.expert_exec_seconds.items())
            },
            "default_exec_seconds": self.default_exec_seconds,
            "recovery_seconds": self.recovery_seconds,
            "consolidated_reads": self.consolidated_reads,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExecutionProfile":
        return cls(
            sm_read_seconds=d["sm_read_seconds"],
            decompress_seconds=d["decompress_seconds"],
            compression_ratio=d["compression_ratio"],
            shards_per_tensor=d["shards_per_tensor"],
            workers=d["workers"],
            tensors_per_expert=d.get("tensors_per_expert", 1),
            e_read_seconds=d.get("e_read_seconds"),
            expert_exec_seconds={
                int(k): float(v)
                for k, v in d.get("expert_exec_seconds", {}).items()
            },
            default_exec_seconds=d.get("default_exec_seconds", 0.0),
            recovery_seconds=d.get("recovery_seconds", 0.0),
            consolidated_reads=d.get("consolidated_reads", False),
        )


def load_profile(path: str) -> ExecutionProfile:
    with open(path) as fh:
        return ExecutionProfile.from_json_dict(json.load(fh))


def save_profile(profile: ExecutionProfile, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(profile.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
