"""Exhaustive makespan oracle for small scheduling instances.

Searches every I/O-op ordering (the lane never idles, so an ordering
fixes each read's completion time) crossed with every non-delay,
work-conserving worker assignment; the serial execution lane adds a
fixed completion once per-expert ready times are known, because its
makespan is order-invariant for any non-idling discipline.  Branch and
bound keeps this tractable at the supported sizes; the incumbent is
seeded with the block scheduler's own makespan, which also lives
inside the searched space, so the result can never exceed it.

The search space is the class of non-delay schedules for the
separate-read execution model.  That is the oracle's definition of
OPT: it contains every priority-list schedule and in particular the
block scheduler's.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import TooLargeError
from .profiles import ExecutionProfile
from .scheduler import lower_bounds, schedule_tasks
from .taskgraph import ExpertTask, needs_e_read, needs_sm_read

_EPS = 1e-9


@dataclass(frozen=True)
class OracleLimits:
    max_tasks: int = 4
    max_shards: int = 2
    max_workers: int = 2
    max_io_ops: int = 8


def io_op_count(queue: list[ExpertTask], profile: ExecutionProfile) -> int:
    return sum(
        (profile.shards_per_tensor if needs_e_read(t.state) else 0)
        + (1 if needs_sm_read(t.state) else 0)
        for t in queue
    )


def _exec_cmax(ready_and_exec) -> float:
    clock = 0.0
    for ready, exec_seconds in sorted(ready_and_exec):
        clock = max(clock, ready) + exec_seconds
    return clock


class _Search:
    def __init__(self, queue: list[ExpertTask], profile: ExecutionProfile):
        self.profile = profile
        self.K = profile.shards_per_tensor
        self.L = profile.workers
        self.v = profile.e_read_seconds
        self.u = profile.sm_read_seconds
        self.c = profile.decompress_seconds
        self.recovery = profile.recovery_seconds
        self.tasks = list(queue)
        self.n = len(self.tasks)
        self.needs_e = [needs_e_read(t.state) for t in self.tasks]
        self.needs_sm = [needs_sm_read(t.state) for t in self.tasks]
        self.expert_of = [t.expert for t in self.tasks]
        self.exec_of = {t.expert: t.exec_seconds for t in self.tasks}
        self.io_total = sum(
            (self.K * self.v if e else 0.0) + (self.u if s else 0.0)
            for e, s in zip(self.needs_e, self.needs_sm)
        )
        self.total_c = self.n * self.K * self.c
        # ALG lives inside the searched space, so it seeds the incumbent
        self.best = schedule_tasks(queue, profile).makespan

    def run(self) -> float:
        releases = [[] if e else [0.0] * self.K for e in self.needs_e]
        sm_time = [None if s else 0.0 for s in self.needs_sm]
        e_left = [self.K if e else 0 for e in self.needs_e]
        sm_left = list(self.needs_sm)
        self._order_io(0.0, e_left, sm_left, releases, sm_time)
        return self.best

    # ---- phase A: order the I/O lane ----

    def _order_io(self, io_t, e_left, sm_left, releases, sm_time):
        if self._bound_a(io_t, e_left, sm_left, releases, sm_time) >= self.best - _EPS:
            return
        open_ops = False
        # E reads first in the branch order: good incumbents come early
        for i in range(self.n):
            if e_left[i]:
                open_ops = True
                e_left[i] -= 1
                releases[i].append(io_t + self.v)
                self._order_io(io_t + self.v, e_left, sm_left, releases, sm_time)
                releases[i].pop()
                e_left[i] += 1
        for i in range(self.n):
            if sm_left[i]:
                open_ops = True
                sm_left[i] = False
                sm_time[i] = io_t + self.u
                self._order_io(io_t + self.u, e_left, sm_left, releases, sm_time)
                sm_time[i] = None
                sm_left[i] = True
        if not open_ops:
            self._assign_workers(releases, sm_time)

    def _bound_a(self, io_t, e_left, sm_left, releases, sm_time) -> float:
        ready_lb = {}
        first_release = None
        for i in range(self.n):
            done = 0.0
            for r in releases[i]:
                done = max(done, r + self.c)
                first_release = r if first_release is None else min(first_release, r)
            if e_left[i]:
                done = max(done, io_t + e_left[i] * self.v + self.c)
                cand = io_t + self.v
                first_release = (
                    cand if first_release is None else min(first_release, cand)
                )
            sm = sm_time[i] if sm_time[i] is not None else io_t + self.u
            ready = max(done, sm) + self.recovery
            exp = self.expert_of[i]
            ready_lb[exp] = max(ready_lb.get(exp, 0.0), ready)
        cmax = _exec_cmax([(ready_lb[e], self.exec_of[e]) for e in ready_lb])
        start = first_release if first_release is not None else 0.0
        return max(self.io_total, cmax, start + self.total_c / self.L)

    # ---- phase B: assign decompressions to workers ----

    def _assign_workers(self, releases, sm_time):
        rel = [sorted(releases[i]) for i in range(self.n)]
        free = tuple([0.0] * self.L)
        idx = tuple([0] * self.n)
        ends = tuple([0.0] * self.n)
        self._worker_dfs(free, idx, ends, rel, sm_time)

    def _leaf(self, free, ends, sm_time) -> float:
        ready = {}
        for i in range(self.n):
            sm = sm_time[i] or 0.0
            r = max(ends[i], sm) + self.recovery
            exp = self.expert_of[i]
            ready[exp] = max(ready.get(exp, 0.0), r)
        cmax = _exec_cmax([(ready[e], self.exec_of[e]) for e in ready])
        return max(self.io_total, free[-1], cmax)

    def _worker_dfs(self, free, idx, ends, rel, sm_time):
        pending = [(rel[i][idx[i]], i) for i in range(self.n) if idx[i] < self.K]
        if not pending:
            value = self._leaf(free, ends, sm_time)
            if value < self.best:
                self.best = value
            return
        if self._bound_b(free, idx, ends, rel, sm_time) >= self.best - _EPS:
            return
        earliest = min(r for r, _ in pending)
        t = free[0] if earliest <= free[0] + _EPS else earliest
        for r, i in pending:
            if r <= t + _EPS:
                end = t + self.c
                new_free = tuple(sorted(free[1:] + (end,)))
                new_idx = idx[:i] + (idx[i] + 1,) + idx[i + 1 :]
                new_ends = ends[:i] + (max(ends[i], end),) + ends[i + 1 :]
                self._worker_dfs(new_free, new_idx, new_ends, rel, sm_time)

    def _bound_b(self, free, idx, ends, rel, sm_time) -> float:
        ready_lb = {}
        remaining = 0
        for i in range(self.n):
            done = ends[i]
            for s in range(idx[i], self.K):
                done = max(done, max(rel[i][s], free[0]) + self.c)
                remaining += 1
            sm = sm_time[i] or 0.0
            ready = max(done, sm) + self.recovery
            exp = self.expert_of[i]
            ready_lb[exp] = max(ready_lb.get(exp, 0.0), ready)
        cmax = _exec_cmax([(ready_lb[e], self.exec_of[e]) for e in ready_lb])
        load = (sum(free) + remaining * self.c) / self.L
        return max(self.io_total, cmax, free[-1], load)


def brute_force_opt(
    queue: list[ExpertTask],
    profile: ExecutionProfile,
    limits: OracleLimits | None = None,
) -> float:
    """Minimum makespan over the oracle's schedule space.

    Raises TooLargeError when the instance exceeds ``limits``; the
    result is checked against the analytic lower bounds before being
    returned.
    """
    limits = limits or OracleLimits()
    if profile.consolidated_reads:
        raise ValueError("the oracle evaluates the separate-read model only")
    if len(queue) > limits.max_tasks:
        raise TooLargeError(f"{len(queue)} tasks exceed limit {limits.max_tasks}")
    if profile.shards_per_tensor > limits.max_shards:
        raise TooLargeError(
            f"{profile.shards_per_tensor} shards exceed limit {limits.max_shards}"
        )
    if profile.workers > limits.max_workers:
        raise TooLargeError(f"{profile.workers} workers exceed limit {limits.max_workers}")
    ops = io_op_count(queue, profile)
    if ops > limits.max_io_ops:
        raise TooLargeError(f"{ops} I/O ops exceed limit {limits.max_io_ops}")
    if not queue:
        return 0.0
    best = _Search(queue, profile).run()
    bounds = lower_bounds(queue, profile)
    assert best >= bounds.best - 1e-6, (
        f"oracle makespan {best} fell below the analytic bound {bounds.best}"
    )
    return best
