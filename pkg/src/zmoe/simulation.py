"""Trace-driven end-to-end simulation.

Per trace record: look up every activated expert's compression state,
expand the non-resident ones into reconstruction tasks, run the block
scheduler, then update the cache pools from the new activation counts.
Fully cached experts execute off the reconstruction path, so a step
where everything hits the full pool costs only the slowest expert.

Everything is deterministic: a (trace, plan, profile) triple always
produces the same report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .cachepool import (
    EVICTION_POLICIES,
    POOL_ORDER,
    CachePools,
    PoolPlan,
    RuntimeStats,
    dispatch,
)
from .errors import NotFoundError
from .profiles import ExecutionProfile
from .scheduler import partition_tasks, build_blocks, simulate
from .taskgraph import CompressionState, io_workload, make_tasks


@dataclass
class StepResult:
    layer: int
    step: int
    makespan: float
    sequential_seconds: float
    overlap_ratio: float
    charge_seconds: float
    io_busy_seconds: float
    hits: dict[str, int]
    queue_states: list[str]
    mixed_queue: bool


@dataclass
class SimulationReport:
    config: dict
    steps: list[StepResult] = field(default_factory=list)
    evictions: int = 0

    @property
    def makespans(self) -> list[float]:
        return [s.makespan for s in self.steps]

    def percentile(self, q: float) -> float:
        values = sorted(self.makespans)
        if not values:
            return 0.0
        idx = min(len(values) - 1, max(0, round(q / 100 * (len(values) - 1))))
        return values[idx]

    def summary(self) -> dict:
        makespans = self.makespans
        total = sum(makespans)
        overlaps = [s.overlap_ratio for s in self.steps]
        hit_hist: dict[str, int] = {p: 0 for p in POOL_ORDER}
        hit_hist["M"] = 0
        pattern_hist: dict[str, int] = {}
        for s in self.steps:
            for pool, n in s.hits.items():
                hit_hist[pool] += n
            key = "/".join(str(s.hits[p]) for p in (*POOL_ORDER, "M"))
            pattern_hist[key] = pattern_hist.get(key, 0) + 1
        return {
            "steps": len(self.steps),
            "mean_makespan": total / len(self.steps) if self.steps else 0.0,
            "p50_makespan": self.percentile(50),
            "p90_makespan": self.percentile(90),
            "p99_makespan": self.percentile(99),
            "max_makespan": max(makespans) if makespans else 0.0,
            "total_makespan": total,
            "mean_overlap_ratio": sum(overlaps) / len(overlaps) if overlaps else 0.0,
            "charge_total": sum(s.charge_seconds for s in self.steps),
            "io_busy_fraction": (
                sum(s.io_busy_seconds for s in self.steps) / total if total else 0.0
            ),
            "hit_histogram": hit_hist,
            "hit_pattern_histogram": {k: pattern_hist[k] for k in sorted(pattern_hist)},
            "evictions": self.evictions,
        }

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "summary": self.summary(),
            "steps": [
                {
                    "layer": s.layer,
                    "step": s.step,
                    "makespan": s.makespan,
                    "sequential_seconds": s.sequential_seconds,
                    "overlap_ratio": s.overlap_ratio,
                    "charge_seconds": s.charge_seconds,
                    "io_busy_seconds": s.io_busy_seconds,
                    "hits": {p: s.hits[p] for p in sorted(s.hits)},
                    "queue_states": s.queue_states,
                    "mixed_queue": s.mixed_queue,
                }
                for s in self.steps
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SimulationReport":
        report = cls(config=d.get("config", {}))
        report.evictions = d.get("summary", {}).get("evictions", 0)
        for s in d.get("steps", []):
            report.steps.append(
                StepResult(
                    layer=s["layer"],
                    step=s["step"],
                    makespan=s["makespan"],
                    sequential_seconds=s["sequential_seconds"],
                    overlap_ratio=s["overlap_ratio"],
                    charge_seconds=s["charge_seconds"],
                    io_busy_seconds=s["io_busy_seconds"],
                    hits={k: int(v) for k, v in s["hits"].items()},
                    queue_states=list(s["queue_states"]),
                    mixed_queue=bool(s["mixed_queue"]),
                )
            )
        return report


_STATE_POOL = {
    CompressionState.FULL: "F",
    CompressionState.COMPRESSED: "C",
    CompressionState.SM_ONLY: "S",
    CompressionState.E_ONLY: "E",
    CompressionState.MISS: "M",
}


def run_simulation(
    profile: ExecutionProfile,
    records,
    plan: PoolPlan,
    num_experts: int | None = None,
    eviction: str = "freq",
    timeline_collector: list | None = None,
    cache_dump: dict | None = None,
) -> SimulationReport:
    records = list(records)
    if not records:
        raise ValueError("empty trace")
    if num_experts is None:
        num_experts = 1 + max(e for r in records for e, _ in r.experts)
    for r in records:
        for e, _ in r.experts:
            if e >= num_experts:
                raise NotFoundError(f"expert {e} outside the configured universe")

    stats = RuntimeStats(num_experts)
    policy = EVICTION_POLICIES[eviction]()
    pools = CachePools(plan, stats, policy)

    report = SimulationReport(
        config={
            "num_experts": num_experts,
            "eviction": eviction,
            "plan": plan.to_json_dict(),
            "profile": profile.to_json_dict(),
        }
    )

    for rec in records:
        states = {}
        token_counts = {}
        hits = {p: 0 for p in POOL_ORDER}
        hits["M"] = 0
        for expert_id, tokens in rec.experts:
            state = pools.lookup_state(expert_id)
            states[(rec.layer, expert_id)] = state
            token_counts[(rec.layer, expert_id)] = tokens
            hits[_STATE_POOL[state]] += 1

        queue = make_tasks(states, profile, token_counts)
        type_one, type_two = partition_tasks(queue)
        schedule = simulate(build_blocks(type_one, type_two, profile), profile)
        if timeline_collector is not None:
            timeline_collector.append(
                {"layer": rec.layer, "step": rec.step, **schedule.to_json_dict()}
            )

        full_exec = [
            profile.exec_seconds(e)
            for (_, e), s in states.items()
            if s is CompressionState.FULL
        ]
        makespan = max([schedule.makespan, *full_exec, 0.0])

        sequential = sum(io_workload(s, profile) for s in states.values()) * (
            profile.tensors_per_expert
        )
        sequential += sum(
            profile.shards_per_tensor
            * profile.decompress_seconds
            * profile.tensors_per_expert
            for s in states.values()
            if s is not CompressionState.FULL
        )
        sequential += sum(
            profile.recovery_seconds * profile.tensors_per_expert
            for s in states.values()
            if s is not CompressionState.FULL
        )
        sequential += sum(profile.exec_seconds(e) for (_, e) in states)

        overlap = 1.0 - makespan / sequential if sequential > 0 else 0.0
        queue_states = sorted({t.state.value for t in queue})
        report.steps.append(
            StepResult(
                layer=rec.layer,
                step=rec.step,
                makespan=makespan,
                sequential_seconds=sequential,
                overlap_ratio=overlap,
                charge_seconds=schedule.charge_seconds,
                io_busy_seconds=schedule.io_busy_seconds,
                hits=hits,
                queue_states=queue_states,
                mixed_queue=len(queue) >= 2 and len(queue_states) >= 2,
            )
        )

        # cache updates happen after the step's latencies are charged
        for expert_id, tokens in rec.experts:
            stats.record_activation(expert_id, tokens)
        for expert_id, _ in rec.experts:
            pool = dispatch(plan, stats.rank(expert_id))
            if pool is None:
                pools.remove(expert_id)
            else:
                pools.insert(pool, expert_id)

    report.evictions = pools.evictions
    if cache_dump is not None:
        cache_dump.update(pools.dump())
    return report


def ablation_table(
    profile: ExecutionProfile,
    records,
    num_experts: int,
    plans: dict[str, PoolPlan],
    evictions=("freq", "lru", "fifo", "marking"),
) -> list[dict]:
    """Latency/throughput rows for every (plan, eviction policy) pair.

    Callers compare the planned hierarchy against baselines by passing
    several plans (for instance the planner's output next to a naive
    single-pool split of the same budget).
    """
    records = list(records)
    tokens = sum(t for r in records for _, t in r.experts)
    rows = []
    for plan_name, plan in plans.items():
        for eviction in evictions:
            rep = run_simulation(
                profile, records, plan, num_experts=num_experts, eviction=eviction
            )
            s = rep.summary()
            rows.append(
                {
                    "plan": plan_name,
                    "eviction": eviction,
                    "mean_latency": s["mean_makespan"],
                    "p99_latency": s["p99_makespan"],
                    "throughput_tokens_per_s": (
                        tokens / s["total_makespan"] if s["total_makespan"] else 0.0
                    ),
                    "evictions": s["evictions"],
                }
            )
    return rows
