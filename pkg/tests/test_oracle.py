import pytest

from zmoe.errors import TooLargeError
from zmoe.oracle import OracleLimits, brute_force_opt, io_op_count
from zmoe.scheduler import lower_bounds, schedule_tasks
from zmoe.taskgraph import CompressionState as CS
from zmoe.taskgraph import critical_path, make_tasks

from conftest import make_profile

STATES = [CS.MISS, CS.COMPRESSED, CS.SM_ONLY, CS.E_ONLY]


def tasks_for(states, prof):
    return make_tasks({(0, i): s for i, s in enumerate(states)}, prof)


@pytest.mark.parametrize("state", STATES)
def test_single_task_equals_critical_path(state):
    prof = make_profile(u=1.0, c=0.3, rho=0.4, shards=2, workers=2,
                        exec_seconds={0: 0.5})
    q = tasks_for([state], prof)
    assert brute_force_opt(q, prof) == pytest.approx(critical_path(q[0], prof))


def test_single_task_staggered_reads():
    # fewer workers than shards: the oracle must find the overlapped plan
    prof = make_profile(u=1.0, c=0.6, rho=0.4, shards=2, workers=1)
    q = tasks_for([CS.MISS], prof)
    assert brute_force_opt(q, prof) == pytest.approx(1.4)


def test_pair_respects_io_bound():
    prof = make_profile(u=1.0, c=0.3, rho=0.4, shards=2, workers=2,
                        exec_seconds={0: 0.5, 1: 0.5})
    q = tasks_for([CS.MISS, CS.E_ONLY], prof)
    opt = brute_force_opt(q, prof)
    alg = schedule_tasks(q, prof).makespan
    assert opt >= 2.4 - 1e-9  # total I/O work
    assert opt <= alg + 1e-9


def test_oracle_can_beat_scheduler():
    # the block heuristic is not optimal on this pair
    prof = make_profile(u=1.0, c=0.3, rho=0.4, shards=2, workers=2,
                        exec_seconds={0: 0.6, 1: 0.45})
    q = tasks_for([CS.MISS, CS.E_ONLY], prof)
    opt = brute_force_opt(q, prof)
    alg = schedule_tasks(q, prof).makespan
    assert opt <= alg + 1e-9
    assert opt >= lower_bounds(q, prof).best - 1e-9


def test_limits_enforced():
    prof = make_profile(shards=2, workers=2, exec_seconds={i: 0.1 for i in range(5)})
    over = tasks_for([CS.COMPRESSED] * 5, prof)
    with pytest.raises(TooLargeError):
        brute_force_opt(over, prof)
    prof3 = make_profile(shards=3)
    with pytest.raises(TooLargeError):
        brute_force_opt(tasks_for([CS.COMPRESSED], prof3), prof3)
    prof_w = make_profile(workers=3)
    with pytest.raises(TooLargeError):
        brute_force_opt(tasks_for([CS.COMPRESSED], prof_w), prof_w)
    prof_io = make_profile(shards=2, exec_seconds={i: 0.1 for i in range(4)})
    heavy = tasks_for([CS.MISS] * 4, prof_io)
    assert io_op_count(heavy, prof_io) == 12
    with pytest.raises(TooLargeError):
        brute_force_opt(heavy, prof_io)
    # a raised ceiling admits it (slow, so only check acceptance)
    assert OracleLimits(max_io_ops=12).max_io_ops == 12


def test_empty_queue():
    assert brute_force_opt([], make_profile()) == 0.0


def test_sandwich_random_instances(rng):
    for _ in range(25):
        shards = int(rng.integers(1, 3))
        workers = int(rng.integers(1, 3))
        prof = make_profile(
            u=float(rng.uniform(0.4, 1.2)),
            c=float(rng.uniform(0.05, 0.7)),
            rho=float(rng.uniform(0.25, 1.0)),
            shards=shards,
            workers=workers,
            exec_seconds={i: float(rng.uniform(0, 0.6)) for i in range(3)},
        )
        n = int(rng.integers(1, 4))
        q = tasks_for([STATES[i] for i in rng.integers(0, 4, n)], prof)
        if io_op_count(q, prof) > 8:
            continue
        opt = brute_force_opt(q, prof)
        alg = schedule_tasks(q, prof).makespan
        lb = lower_bounds(q, prof).best
        assert lb - 1e-9 <= opt <= alg + 1e-9
        assert alg <= (3 - 1 / workers) * opt + 1e-9
