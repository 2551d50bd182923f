"""Activation traces: JSON-lines records of which experts fire per step."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TraceRecord:
    layer: int
    step: int
    experts: tuple[tuple[int, int], ...]  # (expert_id, tokens), ids unique

    def to_json(self) -> str:
        return json.dumps(
            {
                "layer": self.layer,
                "step": self.step,
                "experts": [[e, t] for e, t in self.experts],
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "TraceRecord":
        d = json.loads(line)
        if not d["experts"]:
            raise ValueError("trace record with no experts")
        return cls(
            layer=int(d["layer"]),
            step=int(d["step"]),
            experts=tuple((int(e), int(t)) for e, t in d["experts"]),
        )


def gen_trace(
    num_experts: int,
    top_k: int,
    steps: int,
    skew: float,
    seed: int,
    layers: int = 1,
    batch: int = 1,
) -> list[TraceRecord]:
    """Synthesize a trace with Zipf-skewed expert popularity.

    Expert id doubles as popularity rank: id e fires with weight
    (e+1)**-skew.  Each (layer, step) samples ``top_k`` distinct
    experts per batch element and merges them, summing token counts.
    Deterministic for a given seed.
    """
    if top_k > num_experts:
        raise ValueError("top_k cannot exceed num_experts")
    if min(num_experts, top_k, steps, layers, batch) < 1:
        raise ValueError("all trace dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    weights = (np.arange(1, num_experts + 1, dtype=float)) ** (-skew)
    weights /= weights.sum()
    records = []
    for step in range(steps):
        for layer in range(layers):
            tokens: dict[int, int] = {}
            for _ in range(batch):
                chosen = rng.choice(num_experts, size=top_k, replace=False, p=weights)
                for e in chosen:
                    tokens[int(e)] = tokens.get(int(e), 0) + 1
            records.append(
                TraceRecord(
                    layer=layer,
                    step=step,
                    experts=tuple(sorted(tokens.items())),
                )
            )
    return records


def write_trace(records: list[TraceRecord], path: str) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")


def read_trace(path: str) -> list[TraceRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(TraceRecord.from_json(line))
    return records


def trace_top_k(records: list[TraceRecord]) -> int:
    """Distinct experts per record; traces with batch merging report the max."""
    return max(len(r.experts) for r in records)


def trace_num_experts(records: list[TraceRecord]) -> int:
    return 1 + max(e for r in records for e, _ in r.experts)


def activation_history(
    records: list[TraceRecord], layer: int | None = None
) -> list[list[int]]:
    """Per-step activated id lists for rank modeling.

    Pools across layers by default; pass ``layer`` to estimate a single
    layer's activation skew instead.
    """
    return [
        [e for e, _ in r.experts]
        for r in records
        if layer is None or r.layer == layer
    ]
