"""Runtime cache pools over the ordered hierarchy F, C, S, E.

Pool F holds fully reconstructed tensors, C both compressed chunk
kinds, S only SM chunks, E only E chunks.  An activated expert is
dispatched to the first pool whose rank threshold its popularity rank
clears; overflowing pools evict their least-frequently-activated
resident.  Residency is exclusive: each expert lives in at most one
pool, and the pool determines its compression state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import CapacityError
from .taskgraph import CompressionState

POOL_ORDER = ("F", "C", "S", "E")

POOL_STATE = {
    "F": CompressionState.FULL,
    "C": CompressionState.COMPRESSED,
    "S": CompressionState.SM_ONLY,
    "E": CompressionState.E_ONLY,
}


def default_margin(num_experts: int) -> int:
    """Tolerance margin absorbing runtime rank noise: 5% of the experts."""
    return math.ceil(0.05 * num_experts)


def expert_bytes(pool: str, tensors_per_expert: int, elements_per_tensor: int,
                 compression_ratio: float) -> float:
    """Resident bytes for one expert held at a pool's compression state."""
    base = tensors_per_expert * elements_per_tensor  # one byte per element/stream
    if pool == "F":
        return 2.0 * base
    if pool == "C":
        return (1.0 + compression_ratio) * base
    if pool == "S":
        return 1.0 * base
    if pool == "E":
        return compression_ratio * base
    raise ValueError(f"unknown pool {pool!r}")


@dataclass
class PoolPlan:
    """Capacities (in experts) plus the dispatch thresholds they imply."""

    capacities: dict[str, int]
    memory_ratios: dict[str, float] = field(default_factory=dict)
    margin: int = 0
    expected_cost: float | None = None
    warning: str | None = None

    def __post_init__(self):
        for pool in POOL_ORDER:
            self.capacities.setdefault(pool, 0)
            self.memory_ratios.setdefault(pool, 0.0)
        if any(v < 0 for v in self.capacities.values()) or self.margin < 0:
            raise ValueError("capacities and margin must be non-negative")

    def thresholds(self) -> dict[str, int]:
        out = {}
        cum = 0
        for pool in POOL_ORDER:
            cum += self.capacities[pool]
            out[pool] = cum + self.margin
        return out

    def to_json_dict(self) -> dict:
        return {
            "capacities": {p: self.capacities[p] for p in POOL_ORDER},
            "memory_ratios": {p: self.memory_ratios[p] for p in POOL_ORDER},
            "margin": self.margin,
            "expected_cost": self.expected_cost,
            "warning": self.warning,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PoolPlan":
        return cls(
            capacities={p: int(v) for p, v in d["capacities"].items()},
            memory_ratios={p: float(v) for p, v in d.get("memory_ratios", {}).items()},
            margin=int(d.get("margin", 0)),
            expected_cost=d.get("expected_cost"),
            warning=d.get("warning"),
        )


def load_plan(path: str) -> PoolPlan:
    with open(path) as fh:
        return PoolPlan.from_json_dict(json.load(fh))


def save_plan(plan: PoolPlan, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(plan.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


class RuntimeStats:
    """Activation counts and the popularity ranks they induce."""

    def __init__(self, num_experts: int):
        if num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        self.num_experts = num_experts
        self.counts = [0] * num_experts
        self._ranks: list[int] | None = None

    def record_activation(self, expert_id: int, count: int = 1) -> None:
        if not 0 <= expert_id < self.num_experts:
            raise ValueError(f"unknown expert {expert_id}")
        if count < 0:
            raise ValueError("activation counts only grow")
        self.counts[expert_id] += count
        self._ranks = None

    def rank(self, expert_id: int) -> int:
        if not 0 <= expert_id < self.num_experts:
            raise ValueError(f"unknown expert {expert_id}")
        if self._ranks is None:
            order = sorted(range(self.num_experts), key=lambda e: (-self.counts[e], e))
            self._ranks = [0] * self.num_experts
            for r, e in enumerate(order):
                self._ranks[e] = r
        return self._ranks[expert_id]

    def count(self, expert_id: int) -> int:
        return self.counts[expert_id]


def dispatch(plan: PoolPlan, rank: int) -> str | None:
    """First pool (hierarchy order, non-zero capacity) whose threshold
    the rank clears; None means evict immediately after execution."""
    if rank < 0:
        raise ValueError("rank must be non-negative")
    thresholds = plan.thresholds()
    for pool in POOL_ORDER:
        if plan.capacities[pool] > 0 and rank < thresholds[pool]:
            return pool
    return None


class EvictionPolicy:
    name = "base"

    def on_insert(self, pool: str, expert_id: int, clock: int) -> None:
        pass

    def on_access(self, pool: str, expert_id: int, clock: int) -> None:
        pass

    def victim(self, pool: str, residents: list[int], stats: RuntimeStats) -> int:
        raise NotImplementedError


class FrequencyEviction(EvictionPolicy):
    """Evict the lowest-activation-count resident; ties evict the larger id."""

    name = "freq"

    def victim(self, pool, residents, stats):
        return min(residents, key=lambda e: (stats.count(e), -e))


class LruEviction(EvictionPolicy):
    name = "lru"

    def __init__(self):
        self.last_access: dict[int, int] = {}

    def on_insert(self, pool, expert_id, clock):
        self.last_access[expert_id] = clock

    def on_access(self, pool, expert_id, clock):
        self.last_access[expert_id] = clock

    def victim(self, pool, residents, stats):
        return min(residents, key=lambda e: (self.last_access.get(e, -1), -e))


class FifoEviction(EvictionPolicy):
    name = "fifo"

    def __init__(self):
        self.inserted_at: dict[int, int] = {}

    def on_insert(self, pool, expert_id, clock):
        self.inserted_at[expert_id] = clock

    def victim(self, pool, residents, stats):
        return min(residents, key=lambda e: (self.inserted_at.get(e, -1), -e))


class MarkingEviction(EvictionPolicy):
    """Phase-based marking: accesses mark; a full pool of marks starts a
    new phase; victims come from the unmarked residents."""

    name = "marking"

    def __init__(self):
        self.marked: set[int] = set()

    def on_insert(self, pool, expert_id, clock):
        self.marked.add(expert_id)

    def on_access(self, pool, expert_id, clock):
        self.marked.add(expert_id)

    def victim(self, pool, residents, stats):
        unmarked = [e for e in residents if e not in self.marked]
        if not unmarked:
            self.marked -= set(residents)
            unmarked = residents
        return max(unmarked)


EVICTION_POLICIES = {
    "freq": FrequencyEviction,
    "lru": LruEviction,
    "fifo": FifoEviction,
    "marking": MarkingEviction,
}


class CachePools:
    """Mutable pool state; single writer between layers."""

    def __init__(self, plan: PoolPlan, stats: RuntimeStats, policy: EvictionPolicy | None = None):
        self.plan = plan
        self.stats = stats
        self.policy = policy or FrequencyEviction()
        self.residents: dict[str, list[int]] = {p: [] for p in POOL_ORDER}
        self.where: dict[int, str] = {}
        self.evictions = 0
        self.clock = 0

    def lookup_state(self, expert_id: int) -> CompressionState:
        pool = self.where.get(expert_id)
        return POOL_STATE[pool] if pool else CompressionState.MISS

    def remove(self, expert_id: int) -> None:
        pool = self.where.pop(expert_id, None)
        if pool:
            self.residents[pool].remove(expert_id)

    def insert(self, pool: str, expert_id: int) -> list[int]:
        """Place an expert into ``pool`` (moving it if resident elsewhere)
        and return whatever the pool evicted to make room."""
        if pool not in POOL_ORDER:
            raise ValueError(f"unknown pool {pool!r}")
        if self.plan.capacities[pool] == 0:
            raise CapacityError(f"pool {pool} has zero capacity")
        self.clock += 1
        current = self.where.get(expert_id)
        if current == pool:
            self.policy.on_access(pool, expert_id, self.clock)
            return []
        if current:
            self.remove(expert_id)
        self.residents[pool].append(expert_id)
        self.where[expert_id] = pool
        self.policy.on_insert(pool, expert_id, self.clock)
        return self.evict_overflow(pool)

    def evict_overflow(self, pool: str) -> list[int]:
        evicted = []
        while len(self.residents[pool]) > self.plan.capacities[pool]:
            victim = self.policy.victim(pool, self.residents[pool], self.stats)
            self.remove(victim)
            evicted.append(victim)
            self.evictions += 1
        return evicted

    def touch(self, expert_id: int) -> None:
        pool = self.where.get(expert_id)
        if pool:
            self.clock += 1
            self.policy.on_access(pool, expert_id, self.clock)

    def resident_bytes(self, tensors_per_expert: int, elements_per_tensor: int,
                       compression_ratio: float) -> float:
        return sum(
            expert_bytes(pool, tensors_per_expert, elements_per_tensor, compression_ratio)
            * len(residents)
            for pool, residents in self.residents.items()
        )

    def dump(self) -> dict:
        return {
            "capacities": {p: self.plan.capacities[p] for p in POOL_ORDER},
            "residents": {p: sorted(self.residents[p]) for p in POOL_ORDER},
            "evictions": self.evictions,
        }
