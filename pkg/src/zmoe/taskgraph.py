"""Compression states and per-tensor reconstruction DAGs.

An expert's residency in the cache pools determines how much work each
of its tensors needs before the expert can execute:

    FULL        everything cached, no work at all
    COMPRESSED  both chunk kinds cached: decompress only
    SM_ONLY     SM cached: read E chunks, decompress
    E_ONLY      E chunks cached: read SM, decompress
    MISS        read everything, decompress

Tensors are independent: an expert with n tensors yields n tasks that
share the expert's state and execution time.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .container import ExpertKey
from .profiles import ExecutionProfile


class CompressionState(enum.Enum):
    FULL = "full"
    COMPRESSED = "compressed"
    SM_ONLY = "sm_only"
    E_ONLY = "e_only"
    MISS = "miss"


def needs_sm_read(state: CompressionState) -> bool:
    return state in (CompressionState.MISS, CompressionState.E_ONLY)


def needs_e_read(state: CompressionState) -> bool:
    return state in (CompressionState.MISS, CompressionState.SM_ONLY)


class NodeKind(enum.Enum):
    E_READ_DECOMPRESS = "e_read_decompress"
    SM_READ = "sm_read"
    RECOVER = "recover"


@dataclass(frozen=True)
class DagNode:
    kind: NodeKind
    shard_index: int | None = None
    read_seconds: float = 0.0  # on the I/O lane (0 when the shard is cached)
    work_seconds: float = 0.0  # on a worker (or the recovery stream)


@dataclass(frozen=True)
class TaskDag:
    nodes: tuple[DagNode, ...]
    edges: tuple[tuple[int, int], ...]  # (src, dst) indices into nodes

    def is_empty(self) -> bool:
        return not self.nodes

    def sink(self) -> int | None:
        dsts = {d for _, d in self.edges}
        srcs = {s for s, _ in self.edges}
        sinks = [i for i in range(len(self.nodes)) if i not in srcs]
        return sinks[0] if len(sinks) == 1 and sinks[0] in dsts else None


def build_dag(
    state: CompressionState, shard_count: int, profile: ExecutionProfile | None = None
) -> TaskDag:
    """DAG for one tensor in the given state.

    FULL tensors need no reconstruction and get an empty DAG.  All
    other states end in a single RECOVER sink fed by every shard node
    and, when the SM chunk must be loaded, by an SM_READ node.
    """
    if shard_count < 1:
        raise ValueError("shard_count must be >= 1")
    if state is CompressionState.FULL:
        return TaskDag(nodes=(), edges=())
    e_read = profile.e_read_seconds if profile else 0.0
    c = profile.decompress_seconds if profile else 0.0
    u = profile.sm_read_seconds if profile else 0.0
    recovery = profile.recovery_seconds if profile else 0.0

    nodes = [
        DagNode(
            NodeKind.E_READ_DECOMPRESS,
            shard_index=s,
            read_seconds=e_read if needs_e_read(state) else 0.0,
            work_seconds=c,
        )
        for s in range(shard_count)
    ]
    if needs_sm_read(state):
        nodes.append(DagNode(NodeKind.SM_READ, read_seconds=u))
    recover_index = len(nodes)
    nodes.append(DagNode(NodeKind.RECOVER, work_seconds=recovery))
    edges = tuple((i, recover_index) for i in range(recover_index))
    return TaskDag(nodes=tuple(nodes), edges=edges)


@dataclass(frozen=True)
class ExpertTask:
    """One tensor-reconstruction job."""

    key: ExpertKey
    state: CompressionState
    dag: TaskDag
    exec_seconds: float  # the owning expert's execution time, shared by its tasks
    token_count: int = 1

    @property
    def expert(self) -> tuple[int, int]:
        return self.key.expert


def make_tasks(
    expert_states: dict[tuple[int, int], CompressionState],
    profile: ExecutionProfile,
    token_counts: dict[tuple[int, int], int] | None = None,
) -> list[ExpertTask]:
    """Expand per-expert states into per-tensor tasks; FULL experts yield none."""
    tasks = []
    for (layer, expert_id), state in sorted(expert_states.items()):
        if state is CompressionState.FULL:
            continue
        tokens = (token_counts or {}).get((layer, expert_id), 1)
        for t in range(profile.tensors_per_expert):
            tasks.append(
                ExpertTask(
                    key=ExpertKey(layer, expert_id, t),
                    state=state,
                    dag=build_dag(state, profile.shards_per_tensor, profile),
                    exec_seconds=profile.exec_seconds(expert_id),
                    token_count=tokens,
                )
            )
    return tasks


def io_workload(state: CompressionState, profile: ExecutionProfile) -> float:
    """Seconds of I/O-lane time one tensor in ``state`` requires.

    With the default E-read time this is (1+ratio)*u for MISS, u for
    E_ONLY, ratio*u for SM_ONLY and 0 otherwise.
    """
    total = 0.0
    if needs_e_read(state):
        total += profile.shards_per_tensor * profile.e_read_seconds
    if needs_sm_read(state):
        total += profile.sm_read_seconds
    return total


def critical_path(task: ExpertTask, profile: ExecutionProfile) -> float:
    """Minimum completion time of a single task under its precedence edges.

    E chunks are read back to back from time zero (reading SM first can
    only delay the decompress chain), each shard's decompression starts
    once its chunk lands and a worker frees up, and the SM read follows
    the E reads on the I/O lane.  For workers >= shards this equals
    ratio*u*[needs E I/O] + max(shards*c/min(shards, workers),
    u*[needs SM I/O]) + p; with fewer workers than shards the staggered
    chunk arrivals overlap decompression and the true value is smaller
    than that closed form.
    """
    if task.state is CompressionState.FULL:
        return task.exec_seconds
    K = profile.shards_per_tensor
    lanes = min(profile.workers, K)
    v = profile.e_read_seconds
    c = profile.decompress_seconds

    if profile.consolidated_reads and needs_e_read(task.state):
        # the worker performs the read too: K jobs of v+c, all ready at 0
        releases = [0.0] * K
        work = v + c
        sm_done = profile.sm_read_seconds if needs_sm_read(task.state) else 0.0
    elif needs_e_read(task.state):
        releases = [v * (i + 1) for i in range(K)]
        work = c
        sm_done = K * v + profile.sm_read_seconds if needs_sm_read(task.state) else 0.0
    else:
        releases = [0.0] * K
        work = c
        sm_done = profile.sm_read_seconds if needs_sm_read(task.state) else 0.0

    free = [0.0] * lanes
    decompress_done = 0.0
    for r in releases:
        idx = min(range(lanes), key=free.__getitem__)
        end = max(r, free[idx]) + work
        free[idx] = end
        decompress_done = max(decompress_done, end)

    ready = max(decompress_done, sm_done) + profile.recovery_seconds
    return ready + task.exec_seconds
