"""Command line interface.

Subcommands: compress, inspect, gen-trace, plan, simulate,
pipeline-bench, report.  Exit codes: 0 success, 2 invalid arguments,
3 data corruption, 4 convergence failure.  ZMOE_WORKERS overrides the
worker count everywhere one applies.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import re
import sys

from . import __version__
from .bitfield import Bf16Buffer
from .cachepool import POOL_ORDER, load_plan, save_plan
from .codecs import backend_by_name, backend_names, compression_report
from .container import ExpertKey, inspect_json, open_container, pack_container
from .errors import ConvergenceError, CorruptionError, FormatError, ZmoeError
from .pipeline import measure_profile, pipeline_bench
from .planner import build_rank_model, plan_pools
from .profiles import load_profile
from .reporting import FORMATS, ablation_csv, write_report
from .simulation import SimulationReport, ablation_table, run_simulation
from .trace import (
    activation_history,
    gen_trace,
    read_trace,
    trace_num_experts,
    trace_top_k,
    write_trace,
)

_TENSOR_FILE = re.compile(r"^(\d+)_(\d+)_(\d+)\.bf16$")


def _workers(value: int) -> int:
    env = os.environ.get("ZMOE_WORKERS")
    return int(env) if env else value


def cmd_compress(args) -> int:
    backend = backend_by_name(args.codec)
    experts = {}
    for path in sorted(glob.glob(os.path.join(args.input, "*.bf16"))):
        m = _TENSOR_FILE.match(os.path.basename(path))
        if not m:
            raise ValueError(
                f"unexpected file name {os.path.basename(path)!r}; expected "
                "<layer>_<expert>_<tensor>.bf16"
            )
        layer, expert_id, tensor = (int(g) for g in m.groups())
        with open(path, "rb") as fh:
            experts[ExpertKey(layer, expert_id, tensor)] = Bf16Buffer(fh.read())
    if not experts:
        raise ValueError(f"no .bf16 tensors found under {args.input}")
    header = pack_container(experts, args.K, backend, args.out)
    measured = compression_report(list(experts.values()), backend, args.K)
    print(
        json.dumps(
            {
                "container": args.out,
                "num_experts": header.num_experts,
                "tensors_per_expert": header.tensors_per_expert,
                "shard_count": header.shard_count,
                "codec": args.codec,
                "file_bytes": os.path.getsize(args.out),
                "measured": measured,
            },
            indent=2,
            sort_keys=True,
        )
    )
    return 0


def cmd_inspect(args) -> int:
    print(inspect_json(args.container))
    return 0


def cmd_gen_trace(args) -> int:
    records = gen_trace(
        num_experts=args.num_experts,
        top_k=args.k,
        steps=args.steps,
        skew=args.skew,
        seed=args.seed,
        layers=args.layers,
        batch=args.batch,
    )
    write_trace(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_plan(args) -> int:
    records = read_trace(args.trace)
    profile = load_profile(args.profile)
    model = build_rank_model(activation_history(records), trace_top_k(records))
    plan = plan_pools(
        model,
        pools=tuple(args.pools.split(",")),
        budget_bytes=args.budget_bytes,
        profile=profile,
        elements_per_tensor=args.elements_per_tensor,
        grid_step=args.grid,
        margin=args.margin,
    )
    save_plan(plan, args.out)
    print(json.dumps(plan.to_json_dict(), indent=2, sort_keys=True))
    return 0


def cmd_simulate(args) -> int:
    records = read_trace(args.trace)
    profile = load_profile(args.profile)
    plan = load_plan(args.plan)
    num_experts = args.num_experts or trace_num_experts(records)
    timelines = [] if args.dump_timeline else None
    cache_dump = {} if args.dump_cache else None
    report = run_simulation(
        profile,
        records,
        plan,
        num_experts=num_experts,
        eviction=args.eviction,
        timeline_collector=timelines,
        cache_dump=cache_dump,
    )
    written = write_report(report, args.out, fmt=args.format, figures=args.figures)
    if args.ablation:
        rows = ablation_table(profile, records, num_experts, {"planned": plan})
        with open(args.ablation, "w") as fh:
            fh.write(ablation_csv(rows))
        written.append(args.ablation)
    if args.dump_timeline:
        with open(args.dump_timeline, "w") as fh:
            for entry in timelines:
                fh.write(json.dumps(entry, sort_keys=True))
                fh.write("\n")
        written.append(args.dump_timeline)
    if args.dump_cache:
        with open(args.dump_cache, "w") as fh:
            json.dump(cache_dump, fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(args.dump_cache)
    print(json.dumps({"written": written, "summary": report.summary()}, sort_keys=True))
    return 0


def cmd_pipeline_bench(args) -> int:
    with open_container(args.container) as container:
        if args.experts == "all":
            experts = container.expert_keys()
        else:
            experts = []
            for item in args.experts.split(","):
                layer, expert_id = item.split(":")
                experts.append((int(layer), int(expert_id)))
        workers = _workers(args.workers)
        profile = (
            load_profile(args.profile)
            if args.profile
            else measure_profile(container, workers)
        )
        result = pipeline_bench(
            container, experts, workers=workers, mode=args.mode, profile=profile
        )
        expected = {
            key: container.reconstruct(key.layer, key.expert_id, key.tensor_index)
            for key in result.tensors
        }
        bit_exact = all(result.tensors[k].data == expected[k].data for k in expected)
        if not bit_exact:
            raise CorruptionError("pipeline output differs from direct reconstruction")
    print(
        json.dumps(
            {
                "experts": len(experts),
                "tensors": len(result.tensors),
                "workers": result.workers,
                "mode": result.mode,
                "wall_seconds": result.wall_seconds,
                "reader_busy_seconds": result.reader_busy_seconds,
                "worker_busy_seconds": result.worker_busy_seconds,
                "bit_exact": bit_exact,
            },
            indent=2,
            sort_keys=True,
        )
    )
    return 0


def cmd_report(args) -> int:
    with open(getattr(args, "in")) as fh:
        report = SimulationReport.from_json_dict(json.load(fh))
    written = write_report(report, args.out, fmt=args.format, figures=args.figures)
    print(json.dumps({"written": written}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zmoe", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="pack raw BF16 tensors into a container")
    p.add_argument("--input", required=True, help="directory of <layer>_<expert>_<tensor>.bf16 files")
    p.add_argument("--K", type=int, required=True, help="exponent shards per tensor")
    p.add_argument("--codec", default="order0", choices=backend_names())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("inspect", help="print a container header as JSON")
    p.add_argument("container")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gen-trace", help="synthesize a Zipf-skewed activation trace")
    p.add_argument("--num-experts", type=int, required=True)
    p.add_argument("--k", type=int, required=True, help="experts activated per token")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--skew", type=float, default=1.0, help="Zipf exponent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("plan", help="grid-search cache pool capacities")
    p.add_argument("--trace", required=True)
    p.add_argument("--budget-bytes", type=float, required=True)
    p.add_argument("--pools", default=",".join(POOL_ORDER))
    p.add_argument("--grid", type=float, default=0.1)
    p.add_argument("--profile", required=True)
    p.add_argument("--elements-per-tensor", type=int, required=True)
    p.add_argument("--margin", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="trace-driven end-to-end simulation")
    p.add_argument("--trace", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--num-experts", type=int, default=None)
    p.add_argument("--eviction", default="freq", choices=["freq", "lru", "fifo", "marking"])
    p.add_argument("--format", default="json", choices=FORMATS)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-timeline", default=None, help="write per-step schedules (JSONL)")
    p.add_argument("--dump-cache", default=None, help="write final pool state (JSON)")
    p.add_argument("--ablation", default=None,
                   help="also sweep eviction policies, writing a latency/throughput CSV")
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pipeline-bench", help="threaded reconstruction over a container")
    p.add_argument("--container", required=True)
    p.add_argument("--experts", default="all", help='"all" or "layer:expert,..."')
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--mode", default="separate", choices=["separate", "consolidated"])
    p.add_argument("--profile", default=None)
    p.set_defaults(func=cmd_pipeline_bench)

    p = sub.add_parser("report", help="re-emit a JSON report as json/csv/md with figures")
    p.add_argument("--in", required=True, dest="in")
    p.add_argument("--format", default="md", choices=FORMATS)
    p.add_argument("--out", required=True)
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CorruptionError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, ZmoeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
