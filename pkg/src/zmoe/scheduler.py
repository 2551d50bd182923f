"""Cache-affinity block scheduling and its discrete-event simulator.

The execution model is one serial I/O lane, ``workers`` parallel
decompression lanes and one serial execution lane.  Tasks are grouped
into priority-ordered blocks: each block is seeded with the
highest-priority task that still needs an SM read (Type I), then tasks
whose SM chunk is cached (Type II) are folded in wherever they add no
idle time on the decompression lanes, until the block turns
compute-dominant.  Within a block all E-chunk reads precede all SM
reads, both in task order.

The simulator replays a block list deterministically: the I/O lane
issues its ops back to back, workers are work-conserving (a free
worker always takes the highest-priority ready shard) and the
execution lane runs each expert once all of its tensors are
reconstructed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .profiles import ExecutionProfile
from .taskgraph import (
    CompressionState,
    ExpertTask,
    critical_path,
    io_workload,
    needs_e_read,
    needs_sm_read,
)

_EPS = 1e-9


def is_type_one(task: ExpertTask) -> bool:
    """Type-I tasks block the I/O lane on an SM-chunk read."""
    return needs_sm_read(task.state)


def _priority_key(task: ExpertTask):
    # non-increasing execution time, same-expert tasks consecutive
    return (
        -task.exec_seconds,
        task.key.layer,
        task.key.expert_id,
        task.key.tensor_index,
    )


def partition_tasks(queue: list[ExpertTask]) -> tuple[list[ExpertTask], list[ExpertTask]]:
    type_one = sorted((t for t in queue if is_type_one(t)), key=_priority_key)
    type_two = sorted((t for t in queue if not is_type_one(t)), key=_priority_key)
    return type_one, type_two


@dataclass
class Block:
    tasks: list[ExpertTask] = field(default_factory=list)
    # standalone-simulation lane ends recorded when the block closes
    projected_io_end: float = 0.0
    projected_worker_ends: tuple[float, ...] = ()


@dataclass(frozen=True)
class TimelineOp:
    lane: str
    op: str
    key: tuple
    start: float
    end: float


@dataclass
class Schedule:
    blocks: list[Block]
    timeline: list[TimelineOp]
    makespan: float
    charge_seconds: float  # idle gaps between consecutive ops on a worker lane
    total_worker_idle: float  # charge plus each lane's initial wait
    io_busy_seconds: float
    idle_gaps: list[tuple[tuple, float]]  # (op key, gap) per decompress op
    expert_completion: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "makespan": self.makespan,
            "charge_seconds": self.charge_seconds,
            "total_worker_idle": self.total_worker_idle,
            "io_busy_seconds": self.io_busy_seconds,
            "blocks": [
                [list(t.key.__dict__.values()) for t in b.tasks] for b in self.blocks
            ],
            "timeline": [
                {
                    "lane": op.lane,
                    "op": op.op,
                    "key": list(op.key),
                    "start": op.start,
                    "end": op.end,
                }
                for op in self.timeline
            ],
        }


class _LaneSim:
    """Shared list-simulation of (I/O, workers, exec) over ordered blocks."""

    def __init__(self, blocks: list[list[ExpertTask]], profile: ExecutionProfile):
        self.profile = profile
        self.timeline: list[TimelineOp] = []
        self.io_end = 0.0
        self.worker_ends = [0.0] * profile.workers
        self.charge = 0.0
        self.idle_with_initial = 0.0
        self.idle_gaps: list[tuple[tuple, float]] = []
        self.tensor_done: dict[tuple, float] = {}
        self.expert_completion: dict[tuple, float] = {}
        self.exec_end = 0.0
        self._run(blocks)

    def _run(self, blocks):
        profile = self.profile
        v = profile.e_read_seconds
        u = profile.sm_read_seconds
        c = profile.decompress_seconds

        # I/O lane: never waits, ops back to back in block order.
        clock = 0.0
        e_done: dict[tuple, float] = {}  # (task id, shard) -> completion
        sm_done: dict[tuple, float] = {}  # task id -> completion
        worker_ops = []  # (ready, priority, task, shard, duration)
        order = []  # (block_idx, pos, task)
        for b, tasks in enumerate(blocks):
            for pos, task in enumerate(tasks):
                order.append((b, pos, task))
            io_seq = []
            if not profile.consolidated_reads:
                for pos, task in enumerate(tasks):
                    if needs_e_read(task.state):
                        for s in range(profile.shards_per_tensor):
                            io_seq.append((pos, task, "e_read", s, v))
            for pos, task in enumerate(tasks):
                if needs_sm_read(task.state):
                    io_seq.append((pos, task, "sm_read", None, u))
            for pos, task, kind, shard, dur in io_seq:
                start, clock = clock, clock + dur
                self.timeline.append(
                    TimelineOp("io", kind, (*_task_id(task), shard), start, clock)
                )
                if kind == "e_read":
                    e_done[(_task_id(task), shard)] = clock
                else:
                    sm_done[_task_id(task)] = clock
        self.io_end = clock

        for b, pos, task in order:
            for s in range(profile.shards_per_tensor):
                if profile.consolidated_reads and needs_e_read(task.state):
                    ready, dur = 0.0, v + c
                elif needs_e_read(task.state):
                    ready, dur = e_done[(_task_id(task), s)], c
                else:
                    ready, dur = 0.0, c
                worker_ops.append((ready, (b, pos, s), task, s, dur))

        # Workers: work-conserving, highest priority ready shard first,
        # ties to the lowest-numbered free lane.
        free = list(self.worker_ends)
        lane_ops = [0] * profile.workers
        pending = list(worker_ops)
        decomp_end: dict[tuple, float] = {}
        while pending:
            t_free = min(free)
            ready_now = [op for op in pending if op[0] <= t_free + _EPS]
            if ready_now:
                op = min(ready_now, key=lambda o: o[1])
                start = t_free
            else:
                t_next = min(op[0] for op in pending)
                ready_then = [op for op in pending if op[0] <= t_next + _EPS]
                op = min(ready_then, key=lambda o: o[1])
                start = t_next
            pending.remove(op)
            lane = min(i for i in range(profile.workers) if free[i] <= start + _EPS)
            ready, _, task, shard, dur = op
            gap = start - free[lane]
            self.idle_with_initial += gap
            if lane_ops[lane] > 0:
                self.charge += gap
                self.idle_gaps.append(((*_task_id(task), shard), gap))
            lane_ops[lane] += 1
            end = start + dur
            free[lane] = end
            decomp_end[(_task_id(task), shard)] = end
            self.timeline.append(
                TimelineOp(
                    f"worker-{lane}", "decompress", (*_task_id(task), shard), start, end
                )
            )
        self.worker_ends = free

        # Tensor completion and the serial execution lane.
        expert_ready: dict[tuple, float] = {}
        expert_prio: dict[tuple, tuple] = {}
        expert_exec: dict[tuple, float] = {}
        for b, pos, task in order:
            done = 0.0
            for s in range(profile.shards_per_tensor):
                done = max(done, decomp_end[(_task_id(task), s)])
            if needs_sm_read(task.state):
                done = max(done, sm_done[_task_id(task)])
            done += profile.recovery_seconds
            self.tensor_done[_task_id(task)] = done
            exp = task.expert
            expert_ready[exp] = max(expert_ready.get(exp, 0.0), done)
            expert_prio.setdefault(exp, (b, pos))
            expert_exec[exp] = task.exec_seconds

        clock = 0.0
        remaining = sorted(expert_ready, key=lambda e: (expert_prio[e], e))
        while remaining:
            ready_now = [e for e in remaining if expert_ready[e] <= clock + _EPS]
            if ready_now:
                exp = min(ready_now, key=lambda e: (expert_prio[e], e))
            else:
                clock = min(expert_ready[e] for e in remaining)
                ready_then = [e for e in remaining if expert_ready[e] <= clock + _EPS]
                exp = min(ready_then, key=lambda e: (expert_prio[e], e))
            remaining.remove(exp)
            start = max(clock, expert_ready[exp])
            end = start + expert_exec[exp]
            self.timeline.append(TimelineOp("exec", "execute", exp, start, end))
            self.expert_completion[exp] = end
            clock = end
        self.exec_end = clock

    @property
    def makespan(self) -> float:
        return max([self.io_end, self.exec_end, *self.worker_ends, 0.0])


def _task_id(task: ExpertTask) -> tuple:
    return (task.key.layer, task.key.expert_id, task.key.tensor_index)


def _project_block(tasks: list[ExpertTask], profile: ExecutionProfile) -> _LaneSim:
    return _LaneSim([tasks], profile)


def is_compute_dominant(block: Block | list[ExpertTask], profile: ExecutionProfile) -> bool:
    """True iff every l-th earliest worker completion lags the block's
    I/O completion by at least l E-chunk read times, for l up to
    min(workers, shards)."""
    tasks = block.tasks if isinstance(block, Block) else block
    sim = _project_block(tasks, profile)
    threshold = profile.e_read_seconds
    ends = sorted(sim.worker_ends)
    for l in range(1, min(profile.workers, profile.shards_per_tensor) + 1):
        if ends[l - 1] - sim.io_end < l * threshold - _EPS:
            return False
    return True


def _fallback_position(tasks: list[ExpertTask], new_task: ExpertTask) -> int:
    p_new = new_task.exec_seconds
    type_two = [
        i
        for i, t in enumerate(tasks)
        if not is_type_one(t) and t.exec_seconds >= p_new - _EPS
    ]
    if type_two:
        return max(type_two) + 1
    anchors = [i for i, t in enumerate(tasks) if t.exec_seconds >= p_new - _EPS]
    return (max(anchors) + 1) if anchors else 0


def _insert_task(
    tasks: list[ExpertTask], new_task: ExpertTask, profile: ExecutionProfile
) -> list[ExpertTask]:
    base_idle = _project_block(tasks, profile).idle_with_initial
    for pos in range(len(tasks) + 1):
        candidate = tasks[:pos] + [new_task] + tasks[pos:]
        if _project_block(candidate, profile).idle_with_initial <= base_idle + _EPS:
            return candidate
    pos = _fallback_position(tasks, new_task)
    return tasks[:pos] + [new_task] + tasks[pos:]


def build_blocks(
    type_one: list[ExpertTask],
    type_two: list[ExpertTask],
    profile: ExecutionProfile,
) -> list[Block]:
    """Group partitioned, priority-sorted tasks into ordered blocks.

    Type-II tasks left over when the Type-I sequence runs out (either
    empty from the start or every block closed compute-dominant early)
    have nothing to overlap against and form one trailing block in
    priority order.
    """
    remaining_one = list(type_one)
    remaining_two = list(type_two)
    blocks: list[Block] = []
    while remaining_one:
        tasks = [remaining_one.pop(0)]
        pool = remaining_two + remaining_one  # Type II first, then Type I
        while pool and not is_compute_dominant(tasks, profile):
            candidate = pool.pop(0)
            if candidate in remaining_two:
                remaining_two.remove(candidate)
            else:
                remaining_one.remove(candidate)
            tasks = _insert_task(tasks, candidate, profile)
        blocks.append(_close_block(tasks, profile))
    if remaining_two:
        blocks.append(_close_block(remaining_two, profile))
    return blocks


def _close_block(tasks: list[ExpertTask], profile: ExecutionProfile) -> Block:
    sim = _project_block(tasks, profile)
    return Block(
        tasks=tasks,
        projected_io_end=sim.io_end,
        projected_worker_ends=tuple(sorted(sim.worker_ends)),
    )


def simulate(blocks: list[Block], profile: ExecutionProfile) -> Schedule:
    """Deterministic replay of an ordered block list.

    Pure function of its inputs: repeated calls produce identical
    schedules, timelines included.
    """
    sim = _LaneSim([b.tasks for b in blocks], profile)
    timeline = sorted(sim.timeline, key=lambda op: (op.start, op.lane, op.end))
    return Schedule(
        blocks=blocks,
        timeline=timeline,
        makespan=sim.makespan,
        charge_seconds=sim.charge,
        total_worker_idle=sim.idle_with_initial,
        io_busy_seconds=sim.io_end,
        idle_gaps=sim.idle_gaps,
        expert_completion=sim.expert_completion,
    )


def schedule_tasks(queue: list[ExpertTask], profile: ExecutionProfile) -> Schedule:
    """partition -> build blocks -> simulate, in one call."""
    type_one, type_two = partition_tasks(queue)
    return simulate(build_blocks(type_one, type_two, profile), profile)


@dataclass(frozen=True)
class LowerBounds:
    io_total: float  # I: total I/O lane work
    compute_per_worker: float  # C / workers
    exec_total: float  # P: every expert's execution time, counted once
    max_critical_path: float  # Z

    @property
    def best(self) -> float:
        return max(
            self.io_total,
            self.compute_per_worker,
            self.exec_total,
            self.max_critical_path,
        )


def lower_bounds(queue: list[ExpertTask], profile: ExecutionProfile) -> LowerBounds:
    """Makespan lower bounds valid for any schedule of ``queue``."""
    K = profile.shards_per_tensor
    c = profile.decompress_seconds
    v = profile.e_read_seconds
    if profile.consolidated_reads:
        io_total = sum(
            profile.sm_read_seconds for t in queue if needs_sm_read(t.state)
        )
        compute = sum(
            K * (c + (v if needs_e_read(t.state) else 0.0)) for t in queue
        )
    else:
        io_total = sum(io_workload(t.state, profile) for t in queue)
        compute = sum(K * c for t in queue)
    exec_total = sum(
        {t.expert: t.exec_seconds for t in queue}.values()
    )
    z = max((critical_path(t, profile) for t in queue), default=0.0)
    return LowerBounds(
        io_total=io_total,
        compute_per_worker=compute / profile.workers,
        exec_total=exec_total,
        max_critical_path=z,
    )
