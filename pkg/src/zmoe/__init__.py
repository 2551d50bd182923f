"""Compressed MoE expert offloading at desk scale.

Bit-field BF16 compression with a chunked on-disk container, a
cache-affinity block scheduler with a discrete-event simulator and a
threaded pipeline executor, and a compression-aware hierarchical
cache planner.
"""

__version__ = "0.1.0"

from .bitfield import Bf16Buffer, EShard, SmChunk, decompose, measure_entropy, recompose
from .cachepool import CachePools, PoolPlan, RuntimeStats, dispatch
from .codecs import (
    EChunk,
    Order0Codec,
    ZlibCodec,
    backend_by_id,
    backend_by_name,
    compress_shard,
    compression_report,
    decompress_chunk,
)
from .container import Container, ContainerHeader, ExpertKey, open_container, pack_container
from .oracle import OracleLimits, brute_force_opt
from .planner import (
    HitDistribution,
    HitPattern,
    RankModel,
    SelectionModel,
    build_rank_model,
    elementary_symmetric,
    estimate_makespan,
    fit_selection_probs,
    hit_distribution,
    joint_hit_probability,
    plan_pools,
)
from .profiles import ExecutionProfile, load_profile, save_profile
from .scheduler import (
    Block,
    LowerBounds,
    Schedule,
    build_blocks,
    is_compute_dominant,
    lower_bounds,
    partition_tasks,
    schedule_tasks,
    simulate,
)
from .simulation import SimulationReport, ablation_table, run_simulation
from .taskgraph import (
    CompressionState,
    ExpertTask,
    TaskDag,
    build_dag,
    critical_path,
    io_workload,
    make_tasks,
)
from .trace import TraceRecord, gen_trace, read_trace, write_trace

__all__ = [name for name in dir() if not name.startswith("_")]
