"""Offline cache planning.

Workload skew is captured rank-wise: ``inclusion[r]`` is the marginal
probability that the r-th most popular expert is activated for a
token, with the inclusions summing to the number of experts activated
per token.  Fitting per-rank Bernoulli selection probabilities whose
condition-on-top_k joint reproduces those marginals (iterative
proportional weight fitting over elementary symmetric polynomials)
yields the maximum-entropy workload consistent with the observations.
Cache pools mapped onto contiguous rank intervals then see
Poisson-binomial hit counts, and a grid search over memory splits
minimizes the expected per-layer makespan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cachepool import POOL_ORDER, PoolPlan, default_margin, expert_bytes
from .errors import ConvergenceError, DegenerateModelError
from .profiles import ExecutionProfile

_CLAMP = 1e-6
_FORCED = 1e-12


@dataclass(frozen=True)
class RankModel:
    """Rank-indexed marginal inclusion probabilities."""

    inclusion: np.ndarray  # non-increasing, entries in [0, 1]
    top_k: int

    @property
    def num_experts(self) -> int:
        return len(self.inclusion)

    def __post_init__(self):
        f = np.asarray(self.inclusion, dtype=float)
        if f.ndim != 1 or len(f) == 0:
            raise ValueError("inclusion must be a non-empty vector")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if np.any(f < -1e-12) or np.any(f > 1 + 1e-12):
            raise ValueError("inclusion probabilities must lie in [0, 1]")
        if abs(float(f.sum()) - self.top_k) > 1e-9:
            raise ValueError("inclusion probabilities must sum to top_k")
        if np.any(np.diff(f) > 1e-12):
            raise ValueError("inclusion probabilities must be non-increasing by rank")


def build_rank_model(history, top_k: int, num_experts: int | None = None) -> RankModel:
    """Estimate a rank model from per-step activation sets.

    ``history`` is a sequence of steps, each an iterable of activated
    expert ids; ``num_experts`` widens the universe beyond the ids
    actually seen.  Counts are sorted into ranks, normalized by the
    step count, rescaled to sum to ``top_k`` and clamped away from 0
    and 1: mass shaved off entries above 1 - 1e-6 is redistributed
    equally over the rest, and exact zeros are floored at 1e-6 with the
    difference taken proportionally from the positive entries.
    """
    steps = 0
    counts: dict[int, int] = {}
    for step in history:
        steps += 1
        for expert_id in step:
            counts[expert_id] = counts.get(expert_id, 0) + 1
    if steps == 0:
        raise ValueError("history is empty")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if num_experts is None:
        num_experts = max(counts) + 1
    elif counts and max(counts) >= num_experts:
        raise ValueError("history contains ids beyond num_experts")
    by_expert = np.zeros(num_experts)
    for e, c in counts.items():
        by_expert[e] = c
    f = np.sort(by_expert)[::-1] / steps
    f = f * (top_k / f.sum())

    hi = 1.0 - _CLAMP
    for _ in range(num_experts):
        over = f > hi
        if not over.any():
            break
        excess = float((f[over] - hi).sum())
        f[over] = hi
        f[~over] += excess / max(1, (~over).sum())

    zero = f <= 0.0
    if zero.any():
        lift = _CLAMP * zero.sum()
        f[~zero] -= lift * f[~zero] / f[~zero].sum()
        f[zero] = _CLAMP

    f = np.sort(f)[::-1]
    return RankModel(inclusion=f, top_k=top_k)


def elementary_symmetric(weights, n: int) -> float:
    """Sum over n-subsets of the products of ``weights``.

    The classic one-dimensional coefficient recurrence; weights are
    normalized by their geometric mean first so the result of the
    ratio-based uses downstream cannot overflow, and the scale is put
    back at the end.
    """
    w = np.asarray(weights, dtype=float)
    if n < 0:
        raise ValueError("n must be non-negative")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if n == 0:
        return 1.0
    if n > len(w):
        return 0.0
    positive = w[w > 0]
    scale = math.exp(np.log(positive).mean()) if len(positive) else 1.0
    coeffs = _esp_prefix(w / scale, n)
    return float(coeffs[n] * scale**n)


def _esp_prefix(w: np.ndarray, n: int) -> np.ndarray:
    """coeffs[m] = sum over m-subsets of prod(w), for m = 0..n."""
    coeffs = np.zeros(n + 1)
    coeffs[0] = 1.0
    for x in w:
        coeffs[1 : n + 1] = coeffs[1 : n + 1] + x * coeffs[0:n]
    return coeffs


@dataclass(frozen=True)
class SelectionModel:
    """Per-rank Bernoulli selection probabilities fitted to a RankModel."""

    selection: np.ndarray  # q_r
    weights: np.ndarray  # odds w_r = q_r / (1 - q_r), geometric-mean normalized
    top_k: int
    iterations: int = 0
    residuals: tuple = field(default_factory=tuple)


def inclusion_from_weights(weights: np.ndarray, top_k: int) -> np.ndarray:
    """Marginal inclusion of each item under the condition-on-top_k
    weighted subset distribution: w_i * R(k-1, rest) / R(k, all).

    The leave-one-out polynomials come from prefix/suffix coefficient
    tables combined by convolution.  Deflating the full polynomial
    (R_m - w_i * r_{m-1}) would be cheaper but cancels catastrophically
    once a few weights dominate, which is exactly the regime heavy
    workload skew produces.
    """
    n = len(weights)
    if top_k > n:
        raise ValueError("top_k larger than the weight vector")
    k = top_k
    prefix = np.zeros((n + 1, k))  # degrees 0..k-1 over weights[:i]
    suffix = np.zeros((n + 1, k))  # degrees 0..k-1 over weights[i:]
    prefix[0, 0] = 1.0
    suffix[n, 0] = 1.0
    for i in range(1, n + 1):
        prefix[i] = prefix[i - 1]
        prefix[i, 1:] += weights[i - 1] * prefix[i - 1, :-1]
    for i in range(n - 1, -1, -1):
        suffix[i] = suffix[i + 1]
        suffix[i, 1:] += weights[i] * suffix[i + 1, :-1]
    # R(k-1, all minus i) = sum_a prefix[i][a] * suffix[i+1][k-1-a]
    leave_one_out = np.einsum("ij,ij->i", prefix[:n], suffix[1:, ::-1])
    denom = float(_esp_prefix(weights, k)[k])
    return weights * leave_one_out / denom


def fit_selection_probs(
    model: RankModel,
    tol: float = 1e-9,
    max_iter: int = 10_000,
    pin_margin: float = 1.5e-6,
) -> SelectionModel:
    """Iterative proportional fitting of selection odds.

    Start from the marginals themselves, repeatedly rescale each weight
    by (target marginal / induced marginal) and stop when the induced
    marginals match to ``tol``.

    Ranks with marginals within ``pin_margin`` of 0 or 1 are pinned out
    of the fit (never / always selected) and the rest is fitted against
    the leftover budget: a boundary marginal needs an unbounded odds
    ratio and the multiplicative update approaches it at a rate that
    degrades like the distance to the boundary.  The default margin
    covers exactly the values the rank-model clamp manufactures from
    truly always-on or never-on experts, so pinning restores their real
    behavior; the remaining targets are rescaled (a relative adjustment
    of at most a few parts per million) to keep the fit feasible.
    """
    f = np.asarray(model.inclusion, dtype=float)
    k = model.top_k
    forced_in = f >= 1.0 - pin_margin
    forced_out = f <= pin_margin
    fit_mask = ~(forced_in | forced_out)
    k_eff = k - int(forced_in.sum())
    if k_eff < 0:
        raise ValueError("more forced-in ranks than the selection budget")

    q = np.zeros(len(f))
    q[forced_in] = 1.0
    weights = np.zeros(len(f))
    residuals: list[float] = []
    iterations = 0

    if fit_mask.any() and k_eff > 0:
        target = f[fit_mask]
        target = target * (k_eff / target.sum())
        w = target.copy()
        for iterations in range(1, max_iter + 1):
            w = w / math.exp(np.log(w).mean())
            induced = inclusion_from_weights(w, k_eff)
            residual = float(np.abs(induced - target).max())
            residuals.append(residual)
            if residual < tol:
                break
            w = w * (target / induced)
        else:
            raise ConvergenceError(
                f"IPF residual {residuals[-1]:.3e} after {max_iter} iterations",
                residual=residuals[-1],
            )
        q[fit_mask] = w / (1.0 + w)
        weights[fit_mask] = w
    elif k_eff > 0 and not fit_mask.any():
        raise ValueError("no free ranks left to absorb the selection budget")

    return SelectionModel(
        selection=q,
        weights=weights,
        top_k=k,
        iterations=iterations,
        residuals=tuple(residuals),
    )


@dataclass(frozen=True)
class HitDistribution:
    """Probabilities over 0..n hits within one rank interval."""

    probs: np.ndarray

    def __call__(self, hits: int) -> float:
        if hits < 0 or hits >= len(self.probs):
            return 0.0
        return float(self.probs[hits])


def hit_distribution(selection_probs) -> HitDistribution:
    """Poisson-binomial pmf of the number of selected ranks.

    In-place dynamic program, highest count down to lowest per
    probability, so one vector suffices.
    """
    q = np.asarray(selection_probs, dtype=float)
    if np.any(q < 0) or np.any(q > 1):
        raise ValueError("selection probabilities must lie in [0, 1]")
    size = len(q)
    phi = np.zeros(size + 1)
    phi[0] = 1.0
    for p in q:
        phi[1 : size + 1] = phi[1 : size + 1] * (1.0 - p) + phi[0:size] * p
        phi[0] *= 1.0 - p
    return HitDistribution(phi)


@dataclass(frozen=True)
class HitPattern:
    """Per-pool hit counts for one layer step."""

    full: int = 0
    compressed: int = 0
    sm_only: int = 0
    e_only: int = 0

    def __getitem__(self, pool: str) -> int:
        return {
            "F": self.full,
            "C": self.compressed,
            "S": self.sm_only,
            "E": self.e_only,
        }[pool]

    @property
    def total(self) -> int:
        return self.full + self.compressed + self.sm_only + self.e_only


def joint_hit_probability(
    pattern: HitPattern,
    pool_dists: dict[str, HitDistribution],
    miss_dist: HitDistribution,
    global_dist: HitDistribution,
    top_k: int,
) -> float:
    """P(pattern | exactly top_k experts selected overall)."""
    remaining = top_k - pattern.total
    if remaining < 0:
        return 0.0
    denom = global_dist(top_k)
    if denom <= 0.0:
        raise DegenerateModelError(
            "the selection model gives zero probability to selecting top_k experts"
        )
    prob = miss_dist(remaining) / denom
    for pool, dist in pool_dists.items():
        prob *= dist(pattern[pool])
    return prob


def estimate_makespan(top_k: int, pattern: HitPattern, profile: ExecutionProfile) -> float:
    """Closed-form layer makespan estimate for a hit pattern.

    E-chunk reads are charged to the decompression side as well (the
    consolidated-read accounting), and the result is the larger of the
    aggregate I/O and the per-worker decompression load; token
    execution is excluded.
    """
    n = profile.tensors_per_expert
    K = profile.shards_per_tensor
    sm_chunks = n * (top_k - pattern.full - pattern.compressed - pattern.sm_only)
    e_chunks = n * K * (top_k - pattern.full - pattern.compressed - pattern.e_only)
    io_time = sm_chunks * profile.sm_read_seconds + e_chunks * profile.e_read_seconds
    decompressed = n * K * (top_k - pattern.full)
    decompress_time = (
        e_chunks * profile.e_read_seconds + decompressed * profile.decompress_seconds
    ) / profile.workers
    return max(io_time, decompress_time)


def _grid_points(pools: tuple[str, ...], step: float):
    """All ratio vectors on the step grid summing to 1 over ``pools``."""
    slots = round(1.0 / step)
    if abs(slots * step - 1.0) > 1e-9:
        raise ValueError("grid step must divide 1")

    def rec(remaining, parts):
        if len(parts) == len(pools) - 1:
            yield parts + [remaining]
            return
        for units in range(remaining + 1):
            yield from rec(remaining - units, parts + [units])

    for units in rec(slots, []):
        yield {p: u * step for p, u in zip(pools, units)}


def pool_intervals(capacities: dict[str, int], pools: tuple[str, ...], num_experts: int):
    """Contiguous rank intervals per activated pool, hierarchy order;
    whatever ranks remain form the miss tail."""
    intervals = {}
    offset = 0
    for pool in POOL_ORDER:
        if pool not in pools:
            continue
        size = min(capacities.get(pool, 0), num_experts - offset)
        intervals[pool] = (offset, offset + size)
        offset += size
    return intervals, (offset, num_experts)


def expected_cost(
    capacities: dict[str, int],
    pools: tuple[str, ...],
    selection: np.ndarray,
    top_k: int,
    profile: ExecutionProfile,
    global_dist: HitDistribution | None = None,
) -> float:
    """Expected makespan of a capacity assignment under the fitted model."""
    num_experts = len(selection)
    intervals, tail = pool_intervals(capacities, pools, num_experts)
    dists = {
        pool: hit_distribution(selection[lo:hi]) for pool, (lo, hi) in intervals.items()
    }
    miss_dist = hit_distribution(selection[tail[0] : tail[1]])
    if global_dist is None:
        global_dist = hit_distribution(selection)

    ordered = [p for p in POOL_ORDER if p in intervals]
    cost = 0.0

    def rec(i, counts, budget):
        nonlocal cost
        if i == len(ordered):
            pattern = HitPattern(
                full=counts.get("F", 0),
                compressed=counts.get("C", 0),
                sm_only=counts.get("S", 0),
                e_only=counts.get("E", 0),
            )
            prob = joint_hit_probability(pattern, dists, miss_dist, global_dist, top_k)
            if prob > 0.0:
                cost += prob * estimate_makespan(top_k, pattern, profile)
            return
        pool = ordered[i]
        lo, hi = intervals[pool]
        for hits in range(min(hi - lo, budget) + 1):
            counts[pool] = hits
            rec(i + 1, counts, budget - hits)
        counts.pop(pool, None)

    rec(0, {}, top_k)
    return cost


def plan_pools(
    model: RankModel,
    pools,
    budget_bytes: float,
    profile: ExecutionProfile,
    elements_per_tensor: int,
    grid_step: float = 0.1,
    margin: int | None = None,
) -> PoolPlan:
    """Grid-search memory ratios over the activated pools.

    Each ratio vector is turned into expert capacities via the per-state
    byte sizes, capacities are packed onto rank intervals and the
    expected makespan is minimized.  Ties prefer the lexicographically
    largest ratios in hierarchy order.  A budget too small for even one
    E-only expert yields an all-zero plan with a warning.
    """
    pools = tuple(p for p in POOL_ORDER if p in set(pools))
    if not pools:
        raise ValueError("at least one pool must be activated")
    if not 0.0 < grid_step < 1.0:
        raise ValueError("grid step must lie in (0, 1)")
    num_experts = model.num_experts
    if margin is None:
        margin = default_margin(num_experts)

    bytes_per = {
        p: expert_bytes(
            p, profile.tensors_per_expert, elements_per_tensor, profile.compression_ratio
        )
        for p in POOL_ORDER
    }
    fitted = fit_selection_probs(model)
    selection = fitted.selection
    global_dist = hit_distribution(selection)

    smallest = min(bytes_per[p] for p in pools)
    if budget_bytes < smallest:
        zero = {p: 0 for p in POOL_ORDER}
        cost = expected_cost(zero, pools, selection, model.top_k, profile, global_dist)
        return PoolPlan(
            capacities=zero,
            memory_ratios={p: 0.0 for p in POOL_ORDER},
            margin=margin,
            expected_cost=cost,
            warning="budget below the footprint of a single cached expert",
        )

    best = None
    for ratios in _grid_points(pools, grid_step):
        capacities = {p: 0 for p in POOL_ORDER}
        used = 0
        for p in pools:
            cap = int(ratios[p] * budget_bytes // bytes_per[p])
            cap = min(cap, num_experts - used)
            capacities[p] = cap
            used += cap
        cost = expected_cost(
            capacities, pools, selection, model.top_k, profile, global_dist
        )
        tie = tuple(-ratios.get(p, 0.0) for p in POOL_ORDER)
        key = (cost, tie)
        if best is None or key < best[0]:
            best = (key, ratios, capacities, cost)

    _, ratios, capacities, cost = best
    full_ratios = {p: float(ratios.get(p, 0.0)) for p in POOL_ORDER}
    return PoolPlan(
        capacities=capacities,
        memory_ratios=full_ratios,
        margin=margin,
        expected_cost=cost,
    )
