import pytest

from zmoe.cachepool import (
    CachePools,
    EVICTION_POLICIES,
    PoolPlan,
    RuntimeStats,
    default_margin,
    dispatch,
    expert_bytes,
)
from zmoe.errors import CapacityError
from zmoe.taskgraph import CompressionState as CS


def plan_2222(margin=1):
    return PoolPlan(capacities={"F": 2, "C": 2, "S": 2, "E": 2}, margin=margin)


def test_thresholds():
    plan = plan_2222()
    assert plan.thresholds() == {"F": 3, "C": 5, "S": 7, "E": 9}


def test_dispatch_examples():
    plan = plan_2222()
    assert dispatch(plan, 0) == "F"
    assert dispatch(plan, 4) == "C"
    assert dispatch(plan, 9) is None


def test_dispatch_skips_empty_pools():
    plan = PoolPlan(capacities={"F": 0, "C": 3, "S": 0, "E": 1}, margin=0)
    assert dispatch(plan, 0) == "C"
    assert dispatch(plan, 2) == "C"
    assert dispatch(plan, 3) == "E"
    assert dispatch(plan, 4) is None


def test_dispatch_monotone_in_rank():
    plan = PoolPlan(capacities={"F": 1, "C": 2, "S": 3, "E": 1}, margin=2)
    order = {"F": 0, "C": 1, "S": 2, "E": 3, None: 4}
    levels = [order[dispatch(plan, r)] for r in range(12)]
    assert levels == sorted(levels)


def test_rank_tracking():
    stats = RuntimeStats(4)
    stats.record_activation(3, 5)
    assert stats.rank(3) == 0
    stats.record_activation(1, 5)
    # tie on counts resolves by expert id
    assert stats.rank(1) == 0
    assert stats.rank(3) == 1
    stats.record_activation(3, 1)
    assert stats.rank(3) == 0


def test_unknown_expert_rejected():
    stats = RuntimeStats(2)
    with pytest.raises(ValueError):
        stats.record_activation(2)
    with pytest.raises(ValueError):
        stats.rank(-1)


def test_insert_and_frequency_eviction():
    plan = PoolPlan(capacities={"F": 2, "C": 0, "S": 0, "E": 0}, margin=0)
    stats = RuntimeStats(3)
    pools = CachePools(plan, stats)
    for e, count in ((0, 9), (1, 5), (2, 7)):
        stats.record_activation(e, count)
    pools.insert("F", 0)
    pools.insert("F", 1)
    evicted = pools.insert("F", 2)
    assert evicted == [1]  # count 5 is the minimum
    assert pools.lookup_state(1) is CS.MISS
    assert pools.lookup_state(0) is CS.FULL


def test_eviction_tie_breaks_to_larger_id():
    plan = PoolPlan(capacities={"F": 1, "C": 0, "S": 0, "E": 0}, margin=0)
    stats = RuntimeStats(3)
    pools = CachePools(plan, stats)
    pools.insert("F", 1)
    evicted = pools.insert("F", 2)  # both counts zero
    assert evicted == [2]


def test_insert_empty_pool_no_eviction():
    pools = CachePools(plan_2222(), RuntimeStats(4))
    assert pools.insert("S", 1) == []


def test_zero_capacity_insert_fails():
    plan = PoolPlan(capacities={"F": 0, "C": 1, "S": 0, "E": 0}, margin=0)
    pools = CachePools(plan, RuntimeStats(2))
    with pytest.raises(CapacityError):
        pools.insert("F", 0)


def test_lookup_states():
    pools = CachePools(plan_2222(), RuntimeStats(8))
    pools.insert("S", 3)
    assert pools.lookup_state(3) is CS.SM_ONLY
    assert pools.lookup_state(4) is CS.MISS
    pools.insert("C", 3)  # move between pools keeps residency exclusive
    assert pools.lookup_state(3) is CS.COMPRESSED
    assert 3 not in pools.residents["S"]
    pools.remove(3)
    assert pools.lookup_state(3) is CS.MISS


def test_capacity_invariant_under_churn(rng):
    plan = PoolPlan(capacities={"F": 2, "C": 3, "S": 1, "E": 2}, margin=1)
    stats = RuntimeStats(16)
    pools = CachePools(plan, stats)
    for _ in range(300):
        e = int(rng.integers(0, 16))
        stats.record_activation(e)
        pool = dispatch(plan, stats.rank(e))
        if pool is None:
            pools.remove(e)
        else:
            pools.insert(pool, e)
        for p, residents in pools.residents.items():
            assert len(residents) <= plan.capacities[p]
        assert len(pools.where) == sum(len(r) for r in pools.residents.values())


def test_footprint_accounting():
    n, elements, rho = 2, 128, 0.4
    base = n * elements
    assert expert_bytes("F", n, elements, rho) == pytest.approx(2 * base)
    assert expert_bytes("C", n, elements, rho) == pytest.approx(1.4 * base)
    assert expert_bytes("S", n, elements, rho) == pytest.approx(base)
    assert expert_bytes("E", n, elements, rho) == pytest.approx(0.4 * base)
    plan = PoolPlan(capacities={"F": 1, "C": 1, "S": 1, "E": 1}, margin=0)
    pools = CachePools(plan, RuntimeStats(4))
    for pool, e in zip("FCSE", range(4)):
        pools.insert(pool, e)
    budget = sum(expert_bytes(p, n, elements, rho) for p in "FCSE")
    assert pools.resident_bytes(n, elements, rho) <= budget + 1e-9


def test_default_margin():
    assert default_margin(64) == 4
    assert default_margin(10) == 1


@pytest.mark.parametrize("policy", sorted(EVICTION_POLICIES))
def test_policies_evict_someone(policy):
    plan = PoolPlan(capacities={"F": 2, "C": 0, "S": 0, "E": 0}, margin=0)
    stats = RuntimeStats(4)
    pools = CachePools(plan, stats, EVICTION_POLICIES[policy]())
    for e in range(3):
        stats.record_activation(e, e + 1)
        pools.insert("F", e)
    assert len(pools.residents["F"]) == 2
    assert pools.evictions == 1


def test_lru_evicts_stalest():
    plan = PoolPlan(capacities={"F": 2, "C": 0, "S": 0, "E": 0}, margin=0)
    stats = RuntimeStats(4)
    pools = CachePools(plan, stats, EVICTION_POLICIES["lru"]())
    pools.insert("F", 0)
    pools.insert("F", 1)
    pools.insert("F", 0)  # refresh 0
    assert pools.insert("F", 2) == [1]


def test_fifo_evicts_oldest():
    plan = PoolPlan(capacities={"F": 2, "C": 0, "S": 0, "E": 0}, margin=0)
    stats = RuntimeStats(4)
    pools = CachePools(plan, stats, EVICTION_POLICIES["fifo"]())
    pools.insert("F", 0)
    pools.insert("F", 1)
    pools.insert("F", 0)  # access does not reset insertion order
    assert pools.insert("F", 2) == [0]
