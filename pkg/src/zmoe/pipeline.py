"""Threaded pipeline executor over a real container file.

One reader thread performs the schedule's I/O in block order; a pool
of workers decompresses shards (and, in consolidated mode, reads them
too) and recomposes each tensor once its last prerequisite lands.
Work items flow through a priority queue keyed by block order, so the
executor honors the same priorities the simulator does.  Shutdown is
quiescent: the queue drains, workers get sentinels and join before
the clock stops.
"""

from __future__ import annotations

import dataclasses
import queue
import threading
import time

from .bitfield import Bf16Buffer, SmChunk, recompose
from .codecs import decompress_chunk
from .container import _CHUNK_CELL, Container, ExpertKey
from .profiles import ExecutionProfile
from .scheduler import build_blocks, partition_tasks
from .taskgraph import CompressionState, make_tasks, needs_e_read, needs_sm_read


@dataclasses.dataclass
class PipelineResult:
    wall_seconds: float
    reader_busy_seconds: float
    worker_busy_seconds: list[float]
    tensors: dict[ExpertKey, Bf16Buffer]
    workers: int
    mode: str


class _TensorState:
    __slots__ = ("sm", "shards", "remaining", "lock", "claimed")

    def __init__(self, shard_count: int, await_sm: bool):
        self.sm: bytes | None = None
        self.shards: list[bytes | None] = [None] * shard_count
        self.remaining = shard_count + (1 if await_sm else 0)
        self.lock = threading.Lock()
        self.claimed = False


def _default_profile(container: Container, workers: int) -> ExecutionProfile:
    return ExecutionProfile(
        sm_read_seconds=1.0,
        decompress_seconds=0.5,
        compression_ratio=0.5,
        shards_per_tensor=container.header.shard_count,
        workers=workers,
        tensors_per_expert=container.header.tensors_per_expert,
    )


def measure_profile(container: Container, workers: int, runs: int = 9) -> ExecutionProfile:
    """Median-of-runs micro measurements of read and decompress times."""
    keys = container.expert_keys()
    layer, expert_id = keys[0]
    key = ExpertKey(layer, expert_id, 0)
    sm_times, e_times, c_times = [], [], []
    for _ in range(runs):
        t0 = time.perf_counter()
        container.read_sm(key)
        sm_times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        chunk = container.read_echunk(key, 0)
        e_times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        decompress_chunk(chunk)
        c_times.append(time.perf_counter() - t0)

    def med(xs):
        return sorted(xs)[len(xs) // 2]

    rec = container.header.record(key)
    raw = rec.element_count
    compressed = sum(rec.e_chunk_lengths) - len(rec.e_chunk_lengths) * _CHUNK_CELL.size
    return ExecutionProfile(
        sm_read_seconds=max(med(sm_times), 1e-9),
        e_read_seconds=max(med(e_times), 1e-9),
        decompress_seconds=max(med(c_times), 1e-9),
        compression_ratio=min(1.0, max(1e-6, compressed / raw)),
        shards_per_tensor=container.header.shard_count,
        workers=workers,
        tensors_per_expert=container.header.tensors_per_expert,
    )


def pipeline_bench(
    container: Container,
    experts: list[tuple[int, int]],
    workers: int,
    mode: str = "separate",
    profile: ExecutionProfile | None = None,
    states: dict[tuple[int, int], CompressionState] | None = None,
) -> PipelineResult:
    """Reconstruct ``experts`` from disk with 1 reader + ``workers`` threads.

    Every expert defaults to a full miss; supplying ``states`` marks
    chunk kinds as memory-resident, which the bench models by loading
    them synchronously before the clock starts.  Checksum failures in
    any thread abort the run.  Returns wall-clock time, per-lane busy
    times and the reconstructed tensors.
    """
    if mode not in ("separate", "consolidated"):
        raise ValueError(f"unknown mode {mode!r}")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    header = container.header
    if profile is None:
        profile = _default_profile(container, workers)
    profile = dataclasses.replace(
        profile, workers=workers, consolidated_reads=(mode == "consolidated")
    )

    expert_states = {
        key: (states or {}).get(key, CompressionState.MISS) for key in experts
    }
    tasks = make_tasks(expert_states, profile)
    if not tasks:
        return PipelineResult(0.0, 0.0, [0.0] * workers, {}, workers, mode)
    type_one, type_two = partition_tasks(tasks)
    blocks = build_blocks(type_one, type_two, profile)

    K = header.shard_count
    tensor_state: dict[ExpertKey, _TensorState] = {}
    io_plan = []  # (kind, key, shard, priority)
    preloaded = []  # ops ready before the clock starts
    work_queue: queue.PriorityQueue = queue.PriorityQueue()
    results: dict[ExpertKey, Bf16Buffer] = {}
    results_lock = threading.Lock()
    errors: list[BaseException] = []
    done = threading.Event()
    seq = iter(range(1 << 30))

    for b, block in enumerate(blocks):
        if mode == "separate":
            for pos, task in enumerate(block.tasks):
                if needs_e_read(task.state):
                    for s in range(K):
                        io_plan.append(("e_read", task.key, s, (b, pos, 0, s)))
        for pos, task in enumerate(block.tasks):
            if needs_sm_read(task.state):
                io_plan.append(("sm_read", task.key, None, (b, pos, 1, 0)))

    for b, block in enumerate(blocks):
        for pos, task in enumerate(block.tasks):
            st = _TensorState(K, await_sm=needs_sm_read(task.state))
            tensor_state[task.key] = st
            if not needs_sm_read(task.state):
                # chunk is memory-resident in this state: load it now
                st.sm = container.read_sm(task.key).data
            if needs_e_read(task.state):
                if mode == "consolidated":
                    for s in range(K):
                        preloaded.append(
                            ((b, pos, 0, s), next(seq), "fused_read", task.key, s, None)
                        )
            else:
                for s in range(K):
                    chunk = container.read_echunk(task.key, s)
                    preloaded.append(
                        ((b, pos, 0, s), next(seq), "decompress", task.key, s, chunk)
                    )

    outstanding = len(tensor_state)
    outstanding_lock = threading.Lock()

    def finish_tensor():
        nonlocal outstanding
        with outstanding_lock:
            outstanding -= 1
            if outstanding == 0:
                done.set()

    def complete_part(key: ExpertKey) -> bool:
        """True when the caller just supplied the last prerequisite."""
        st = tensor_state[key]
        with st.lock:
            st.remaining -= 1
            if st.remaining == 0 and not st.claimed:
                st.claimed = True
                return True
        return False

    def recover(key: ExpertKey):
        st = tensor_state[key]
        exponents = b"".join(st.shards)  # type: ignore[arg-type]
        if st.sm is None:
            raise RuntimeError(f"recompose of {key} reached without SM bytes")
        tensor = recompose(SmChunk(st.sm), exponents)
        with results_lock:
            results[key] = tensor
        finish_tensor()

    reader_busy = [0.0]

    def reader():
        try:
            for kind, key, shard, prio in io_plan:
                if errors:
                    return
                t0 = time.perf_counter()
                if kind == "e_read":
                    chunk = container.read_echunk(key, shard)
                    reader_busy[0] += time.perf_counter() - t0
                    work_queue.put((prio, next(seq), "decompress", key, shard, chunk))
                else:
                    sm = container.read_sm(key)
                    reader_busy[0] += time.perf_counter() - t0
                    tensor_state[key].sm = sm.data
                    if complete_part(key):
                        work_queue.put(
                            (
                                (prio[0], prio[1], 2, 0),
                                next(seq),
                                "recover",
                                key,
                                None,
                                None,
                            )
                        )
        except BaseException as exc:  # noqa: BLE001 - surfaced to the caller
            errors.append(exc)
            done.set()

    busy = [0.0] * workers

    def worker(idx: int):
        while True:
            item = work_queue.get()
            try:
                kind = item[2]
                if kind == "stop":
                    return
                _, _, kind, key, shard, payload = item
                t0 = time.perf_counter()
                if kind == "fused_read":
                    payload = container.read_echunk(key, shard)
                    kind = "decompress"
                if kind == "decompress":
                    data = decompress_chunk(payload)
                    tensor_state[key].shards[shard] = data
                    if complete_part(key):
                        recover(key)
                elif kind == "recover":
                    recover(key)
                busy[idx] += time.perf_counter() - t0
            except BaseException as exc:  # noqa: BLE001
                errors.append(exc)
                done.set()
                return
            finally:
                work_queue.task_done()

    start = time.perf_counter()
    for item in preloaded:
        work_queue.put(item)
    reader_thread = threading.Thread(target=reader, name="zmoe-reader")
    threads = [
        threading.Thread(target=worker, args=(i,), name=f"zmoe-worker-{i}")
        for i in range(workers)
    ]
    reader_thread.start()
    for t in threads:
        t.start()
    done.wait()
    for _ in threads:
        work_queue.put(((1 << 30, 0, 0, 0), next(seq), "stop", None, None, None))
    reader_thread.join()
    for t in threads:
        t.join()
    wall = time.perf_counter() - start

    if errors:
        raise errors[0]
    return PipelineResult(
        wall_seconds=wall,
        reader_busy_seconds=reader_busy[0],
        worker_busy_seconds=busy,
        tensors=results,
        workers=workers,
        mode=mode,
    )
