import json

import numpy as np
import pytest

from zmoe.cachepool import PoolPlan, expert_bytes
from zmoe.errors import NotFoundError
from zmoe.planner import build_rank_model, plan_pools
from zmoe.simulation import SimulationReport, run_simulation
from zmoe.trace import (
    activation_history,
    gen_trace,
    read_trace,
    trace_num_experts,
    trace_top_k,
    write_trace,
)

from conftest import make_profile


def test_gen_trace_uniform_inclusion():
    recs = gen_trace(8, 2, 10_000, 0.0, seed=1)
    counts = np.zeros(8)
    for r in recs:
        for e, _ in r.experts:
            counts[e] += 1
    inclusion = counts / len(recs)
    assert inclusion == pytest.approx(np.full(8, 0.25), abs=0.02)


def test_gen_trace_skew_orders_popularity():
    recs = gen_trace(8, 2, 5000, 2.0, seed=2)
    counts = np.zeros(8)
    for r in recs:
        for e, _ in r.experts:
            counts[e] += 1
    assert counts[0] > counts[7]


def test_gen_trace_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_trace(gen_trace(16, 4, 200, 1.0, seed=7), str(a))
    write_trace(gen_trace(16, 4, 200, 1.0, seed=7), str(b))
    assert a.read_bytes() == b.read_bytes()


def test_gen_trace_distinct_experts_per_step():
    recs = gen_trace(8, 3, 500, 1.5, seed=3)
    for r in recs:
        ids = [e for e, _ in r.experts]
        assert len(ids) == len(set(ids)) == 3


def test_gen_trace_rejects_oversized_k():
    with pytest.raises(ValueError):
        gen_trace(4, 5, 10, 1.0, seed=0)


def test_trace_roundtrip(tmp_path):
    recs = gen_trace(8, 2, 50, 1.0, seed=4, layers=2)
    path = str(tmp_path / "t.jsonl")
    write_trace(recs, path)
    back = read_trace(path)
    assert back == recs
    assert trace_top_k(back) == 2
    assert trace_num_experts(back) <= 8


def _sim_setup(budget_fraction, steps=150, num_experts=16, k=2, seed=5):
    prof = make_profile(
        u=1.0, c=0.3, rho=0.4, shards=2, workers=2, tensors=2,
        exec_seconds={i: 0.2 + 0.02 * i for i in range(num_experts)},
    )
    recs = gen_trace(num_experts, k, steps, 1.2, seed=seed)
    model = build_rank_model(activation_history(recs), k, num_experts=num_experts)
    budget = budget_fraction * num_experts * expert_bytes("F", 2, 128, 0.4)
    plan = plan_pools(model, ("F", "C", "S", "E"), budget, prof,
                      elements_per_tensor=128, grid_step=0.25)
    return prof, recs, plan


def test_all_cached_runs_at_exec_speed():
    prof, recs, _ = _sim_setup(0.0, steps=40, num_experts=8)
    plan = PoolPlan(capacities={"F": 8, "C": 0, "S": 0, "E": 0}, margin=8)
    report = run_simulation(prof, recs, plan, num_experts=8)
    warm = report.steps[5:]
    for step_result, rec in zip(warm, recs[5:]):
        if step_result.hits["F"] == len(rec.experts):
            expected = max(prof.exec_seconds(e) for e, _ in rec.experts)
            assert step_result.makespan == pytest.approx(expected)


def test_zero_budget_every_step_misses():
    prof, recs, _ = _sim_setup(0.0, steps=30)
    plan = PoolPlan(capacities={"F": 0, "C": 0, "S": 0, "E": 0}, margin=0)
    report = run_simulation(prof, recs, plan, num_experts=16)
    for s in report.steps:
        assert s.hits["M"] == sum(s.hits.values())
        assert s.queue_states == ["miss"]


def test_zero_budget_matches_direct_schedule():
    from zmoe.scheduler import schedule_tasks
    from zmoe.taskgraph import CompressionState, make_tasks

    prof, recs, _ = _sim_setup(0.0, steps=5)
    plan = PoolPlan(capacities={"F": 0, "C": 0, "S": 0, "E": 0}, margin=0)
    report = run_simulation(prof, recs, plan, num_experts=16)
    for s, rec in zip(report.steps, recs):
        tasks = make_tasks(
            {(rec.layer, e): CompressionState.MISS for e, _ in rec.experts}, prof
        )
        assert s.makespan == pytest.approx(schedule_tasks(tasks, prof).makespan)


def test_makespan_bounded_by_sequential_sum():
    prof, recs, plan = _sim_setup(0.35, steps=200)
    report = run_simulation(prof, recs, plan, num_experts=16)
    for s in report.steps:
        assert s.makespan <= s.sequential_seconds + 1e-9
        assert 0.0 <= s.overlap_ratio < 1.0


def test_mixed_queues_overlap():
    prof, recs, plan = _sim_setup(0.35, steps=300)
    report = run_simulation(prof, recs, plan, num_experts=16)
    mixed = [s for s in report.steps if s.mixed_queue]
    assert mixed, "fixture produced no mixed-state steps"
    good = sum(1 for s in mixed if s.overlap_ratio > 0)
    assert good / len(mixed) >= 0.95


def test_determinism_byte_identical():
    prof, recs, plan = _sim_setup(0.3, steps=80)
    a = run_simulation(prof, recs, plan, num_experts=16)
    b = run_simulation(prof, recs, plan, num_experts=16)
    assert json.dumps(a.to_json_dict(), sort_keys=True) == json.dumps(
        b.to_json_dict(), sort_keys=True
    )


def test_unknown_expert_rejected():
    prof, recs, plan = _sim_setup(0.3, steps=5)
    with pytest.raises(NotFoundError):
        run_simulation(prof, recs, plan, num_experts=2)


def test_eviction_policies_all_run():
    prof, recs, plan = _sim_setup(0.3, steps=60)
    summaries = {}
    for policy in ("freq", "lru", "fifo", "marking"):
        rep = run_simulation(prof, recs, plan, num_experts=16, eviction=policy)
        summaries[policy] = rep.summary()["total_makespan"]
    assert len(summaries) == 4
    assert all(v > 0 for v in summaries.values())


def test_histograms_cover_every_step():
    prof, recs, plan = _sim_setup(0.3, steps=50)
    report = run_simulation(prof, recs, plan, num_experts=16)
    hist = report.summary()["hit_histogram"]
    assert sum(hist.values()) == sum(len(r.experts) for r in recs)
    pattern_hist = report.summary()["hit_pattern_histogram"]
    assert sum(pattern_hist.values()) == len(recs)


def test_ablation_table_shape():
    from zmoe.simulation import ablation_table

    prof, recs, plan = _sim_setup(0.3, steps=40)
    naive = PoolPlan(capacities={"F": 3, "C": 0, "S": 0, "E": 0}, margin=1)
    rows = ablation_table(
        prof, recs, 16, {"planned": plan, "full_pool_only": naive}
    )
    assert len(rows) == 8  # 2 plans x 4 eviction policies
    assert {r["plan"] for r in rows} == {"planned", "full_pool_only"}
    assert all(r["throughput_tokens_per_s"] > 0 for r in rows)
    assert all(r["mean_latency"] > 0 for r in rows)


def test_per_layer_history_filter():
    recs = gen_trace(8, 2, 30, 1.0, seed=6, layers=3)
    pooled = activation_history(recs)
    only_one = activation_history(recs, layer=1)
    assert len(pooled) == 90
    assert len(only_one) == 30


def test_report_json_roundtrip():
    prof, recs, plan = _sim_setup(0.3, steps=30)
    report = run_simulation(prof, recs, plan, num_experts=16)
    back = SimulationReport.from_json_dict(report.to_json_dict())
    assert back.to_json_dict()["steps"] == report.to_json_dict()["steps"]
    assert back.summary()["hit_histogram"] == report.summary()["hit_histogram"]
