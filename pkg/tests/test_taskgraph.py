import pytest

from zmoe.container import ExpertKey
from zmoe.taskgraph import (
    CompressionState,
    NodeKind,
    build_dag,
    critical_path,
    io_workload,
    make_tasks,
)

from conftest import make_profile

ALL_STATES = list(CompressionState)


def test_miss_dag_topology():
    dag = build_dag(CompressionState.MISS, 2)
    kinds = [n.kind for n in dag.nodes]
    assert kinds.count(NodeKind.E_READ_DECOMPRESS) == 2
    assert kinds.count(NodeKind.SM_READ) == 1
    assert kinds.count(NodeKind.RECOVER) == 1
    recover = kinds.index(NodeKind.RECOVER)
    assert sorted(dag.edges) == [(0, recover), (1, recover), (2, recover)]


def test_full_dag_empty():
    assert build_dag(CompressionState.FULL, 8).is_empty()


def test_compressed_dag_has_no_io():
    prof = make_profile(shards=3)
    dag = build_dag(CompressionState.COMPRESSED, 3, prof)
    shard_nodes = [n for n in dag.nodes if n.kind is NodeKind.E_READ_DECOMPRESS]
    assert len(shard_nodes) == 3
    assert all(n.read_seconds == 0.0 for n in shard_nodes)
    assert not any(n.kind is NodeKind.SM_READ for n in dag.nodes)


@pytest.mark.parametrize("state", [s for s in ALL_STATES if s is not CompressionState.FULL])
def test_recover_is_unique_sink(state):
    dag = build_dag(state, 4)
    sink = dag.sink()
    assert sink is not None
    assert dag.nodes[sink].kind is NodeKind.RECOVER
    # acyclic by construction: every edge points at the sink
    assert all(dst == sink and src < sink for src, dst in dag.edges)


def test_io_workload_values():
    prof = make_profile(u=1.0, rho=0.4, shards=2)
    assert io_workload(CompressionState.MISS, prof) == pytest.approx(1.4)
    assert io_workload(CompressionState.SM_ONLY, prof) == pytest.approx(0.4)
    assert io_workload(CompressionState.E_ONLY, prof) == pytest.approx(1.0)
    assert io_workload(CompressionState.COMPRESSED, prof) == 0.0
    assert io_workload(CompressionState.FULL, prof) == 0.0


def test_critical_path_examples():
    prof = make_profile(u=1.0, c=0.3, rho=0.4, shards=2, workers=2,
                        exec_seconds={0: 0.5})
    t = make_tasks({(0, 0): CompressionState.MISS}, prof)[0]
    assert critical_path(t, prof) == pytest.approx(1.9)
    t = make_tasks({(0, 0): CompressionState.E_ONLY}, prof)[0]
    assert critical_path(t, prof) == pytest.approx(1.5)
    prof0 = make_profile(u=1.0, c=0.3, rho=0.4, shards=2, workers=2)
    t = make_tasks({(0, 0): CompressionState.COMPRESSED}, prof0)[0]
    assert critical_path(t, prof0) == pytest.approx(0.3)


def test_critical_path_staggers_with_fewer_workers():
    # one worker, two shards: the first decompress overlaps the second read
    prof = make_profile(u=1.0, c=0.6, rho=0.4, shards=2, workers=1)
    t = make_tasks({(0, 0): CompressionState.MISS}, prof)[0]
    # reads finish at 0.2/0.4; decompressions run 0.2-0.8 and 0.8-1.4; SM at 1.4
    assert critical_path(t, prof) == pytest.approx(1.4)


def test_full_experts_make_no_tasks():
    prof = make_profile(tensors=3)
    tasks = make_tasks(
        {(0, 0): CompressionState.FULL, (0, 1): CompressionState.MISS}, prof
    )
    assert {t.key.expert_id for t in tasks} == {1}
    assert len(tasks) == 3


def test_tasks_share_expert_exec_time():
    prof = make_profile(tensors=2, exec_seconds={5: 1.25})
    tasks = make_tasks({(0, 5): CompressionState.MISS}, prof)
    assert [t.exec_seconds for t in tasks] == [1.25, 1.25]
    assert [t.key for t in tasks] == [ExpertKey(0, 5, 0), ExpertKey(0, 5, 1)]


def test_io_workload_matches_simulator_busy_time():
    from zmoe.scheduler import schedule_tasks

    prof = make_profile(u=1.0, c=0.3, rho=0.4, shards=2, workers=2, tensors=2,
                        exec_seconds={i: 0.1 * i for i in range(4)})
    states = {
        (0, 0): CompressionState.MISS,
        (0, 1): CompressionState.SM_ONLY,
        (0, 2): CompressionState.E_ONLY,
        (0, 3): CompressionState.COMPRESSED,
    }
    tasks = make_tasks(states, prof)
    total = sum(io_workload(t.state, prof) for t in tasks)
    sched = schedule_tasks(tasks, prof)
    assert sched.io_busy_seconds == pytest.approx(total)
