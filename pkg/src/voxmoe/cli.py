"""Command-line frontend.

Subcommands: ``voxelize``, ``detect``, ``route-stats``, ``bench-spconv``,
``bench-pipeline``, ``graph-opt``, ``ks-test``.  Configuration comes from a
single JSON file; command-line flags override file values.  Detections emit
as JSON lines, benchmarks as CSV with a one-line header.  Every subcommand
is deterministic given (inputs, config, seed) and exits nonzero on error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import graphopt, pipeline, spconv, training, voxels
from .backend import ACTIVE_BACKEND
from .dispatch import Expert, route_statistics, RouteDecision, Scenario
from .errors import VoxmoeError
from .pipeline_sim import PipelineSpec, simulate_pipeline


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="RNG seed")
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker partition count (results are worker-invariant)")


def _cmd_voxelize(args) -> int:
    config = pipeline.load_config(args.config)
    points = voxels.load_point_cloud(args.cloud)
    tensor, dropped = voxels.voxelize(points, config.grid)
    print(f"voxels={tensor.num_voxels} channels={tensor.num_channels} "
          f"dropped_points={dropped}")
    if args.out:
        np.savez(args.out, coords=tensor.coords, feats=tensor.feats,
                 origin=config.grid.origin, voxel_size=config.grid.voxel_size,
                 extents=config.grid.extents)
        print(f"wrote {args.out}")
    return 0


def _cmd_detect(args) -> int:
    overrides = {"dispatch.distance_d": args.distance_d,
                 "dispatch.confidence_c": args.confidence_c}
    config = pipeline.load_config(args.config, overrides)
    result = pipeline.run_pipeline(args.cloud, args.image_features, config,
                                   workers=args.workers)
    decision = result.decision
    print(f"scenario={decision.scenario.value} expert={decision.expert.value} "
          f"detections={len(result.detections)} dropped_points={result.dropped_points}")
    for stage, seconds in result.timings.items():
        print(f"timing {stage}: {seconds * 1e3:.3f} ms")
    for stage, count in result.op_counts.items():
        print(f"ops {stage}: sparse_fmas={count.sparse_fmas} dense_fmas={count.dense_fmas}")
    if args.out:
        from .experts import write_detections_jsonl
        write_detections_jsonl(args.out, result.detections, config.classes,
                               decision.expert.value)
        print(f"wrote {args.out}")
    if args.decision_out:
        with open(args.decision_out, "a") as fh:
            fh.write(json.dumps(result.decision_record()) + "\n")
    return 0


def _cmd_route_stats(args) -> int:
    decisions = []
    with open(args.decisions) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            decisions.append(RouteDecision.for_scenario(Scenario(doc["scenario"])))
    stats = route_statistics(decisions)
    print(f"total={stats.total}")
    for expert in Expert:
        print(f"{expert.value}: count={stats.counts[expert]} "
              f"fraction={stats.fractions[expert]:.6f}")
    return 0


def _random_tensor(grid: voxels.VoxelGridSpec, occupancy: float, channels: int,
                   rng: np.random.Generator) -> voxels.SparseVoxelTensor:
    n_cells = grid.num_cells
    n = int(occupancy * n_cells)
    if n == 0:
        return voxels.SparseVoxelTensor.empty(grid, channels)
    keys = rng.choice(n_cells, size=n, replace=False)
    coords = voxels.delinearize_many(np.sort(keys), grid)
    feats = rng.standard_normal((n, channels))
    return voxels.SparseVoxelTensor(grid, coords, feats)


def _cmd_bench_spconv(args) -> int:
    ext = args.extent
    if ext > args.max_extent:
        raise ValueError(f"grid extent {ext} exceeds the cap {args.max_extent}")
    grid = voxels.VoxelGridSpec((0, 0, 0), (1, 1, 1), (ext, ext, ext))
    rng = np.random.default_rng(args.seed)
    k = args.kernel
    kernel = spconv.KernelSpec((k, k, k), args.cin, args.cout,
                               rng.standard_normal((k ** 3, args.cin, args.cout)))
    occupancies = sorted(float(v) for v in args.occupancies.split(","))
    rows = []
    for occ in occupancies:
        tensor = _random_tensor(grid, occ, args.cin, rng)
        count = spconv.fma_op_count(tensor, kernel)
        t0 = time.perf_counter()
        for _ in range(args.repeats):
            spconv.sparse_conv(tensor, kernel, workers=args.workers)
        t_sparse = (time.perf_counter() - t0) / args.repeats
        dense = spconv.densify(tensor)
        t0 = time.perf_counter()
        for _ in range(args.repeats):
            spconv.dense_conv_oracle(dense, kernel)
        t_dense = (time.perf_counter() - t0) / args.repeats
        rows.append([occ, count.sparse_fmas, count.dense_fmas,
                     f"{t_sparse:.9f}", f"{t_dense:.9f}"])
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["occupancy", "sparse_fmas", "dense_fmas",
                         "wall_sparse_s", "wall_dense_s"])
        writer.writerows(rows)
    print(f"wrote {args.out} ({len(rows)} rows, backend={ACTIVE_BACKEND})")
    return 0


def _cmd_bench_pipeline(args) -> int:
    specs = []
    if args.specs:
        for part in args.specs.split(";"):
            n, t, c = part.split(":")
            specs.append((int(n), float(t), float(c)))
    rng = np.random.default_rng(args.seed)
    for _ in range(args.random):
        specs.append((int(rng.integers(1, 16)),
                      float(rng.uniform(0, 10)), float(rng.uniform(0, 10))))
    if not specs:
        raise ValueError("no pipeline specs given (use --specs and/or --random)")
    rows = []
    for n, t, c in specs:
        overlap = simulate_pipeline(PipelineSpec(n, t, c, overlap=True)).makespan
        serial = simulate_pipeline(PipelineSpec(n, t, c, overlap=False)).makespan
        speedup = serial / overlap if overlap > 0 else 1.0
        rows.append([n, t, c, repr(overlap), repr(serial), f"{speedup:.6f}"])
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chunks", "transfer", "compute",
                         "overlap_makespan", "serial_makespan", "speedup"])
        writer.writerows(rows)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def _cmd_graph_opt(args) -> int:
    graph = graphopt.load_graph(args.graph)
    print(f"loaded {args.graph}: {graph.node_count} nodes")
    if args.prune is not None:
        graph = graphopt.prune_graph(graph, args.prune)
        print(f"after prune(threshold={args.prune}): {graph.node_count} nodes")
    if args.quantize:
        graph, scales = graphopt.quantize_graph(graph)
        print(f"after quantize: {graph.node_count} nodes, "
              f"{len(scales)} weight tensors quantized")
    if args.fuse:
        graph = graphopt.fuse_graph(graph)
        print(f"after fuse: {graph.node_count} nodes")
    graphopt.save_graph(args.out, graph)
    print(f"wrote {args.out}")
    return 0


def _cmd_ks_test(args) -> int:
    a = np.loadtxt(args.sample_a, ndmin=1)
    b = np.loadtxt(args.sample_b, ndmin=1)
    result = training.ks_two_sample(a, b)
    # No significance verdict on purpose: the caller picks the alpha level.
    print(f"D={result.statistic:.9f} p={result.pvalue:.9g} "
          f"n={a.size} m={b.size}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxmoe",
        description="Sparse-voxel perception pipeline with scenario-routed experts")
    parser.add_argument("--version", action="version", version=f"voxmoe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="voxelize a point-cloud file")
    p.add_argument("--config", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", default=None, help="optional .npz output")
    _add_common(p)
    p.set_defaults(func=_cmd_voxelize)

    p = sub.add_parser("detect", help="run the routed detection pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--image-features", default=None,
                   help="pixel-feature file (needed only on the multimodal route)")
    p.add_argument("--out", default=None, help="detections JSONL path")
    p.add_argument("--decision-out", default=None,
                   help="append the routing decision as one JSON line")
    p.add_argument("--distance-d", type=float, default=None,
                   help="override dispatch.distance_d")
    p.add_argument("--confidence-c", type=float, default=None,
                   help="override dispatch.confidence_c")
    _add_common(p)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("route-stats", help="tally routing decisions from a JSONL file")
    p.add_argument("--decisions", required=True)
    p.set_defaults(func=_cmd_route_stats)

    p = sub.add_parser("bench-spconv", help="sparse vs dense conv benchmark CSV")
    p.add_argument("--extent", type=int, default=16, help="cubic grid cells per axis")
    p.add_argument("--max-extent", type=int, default=32, help="grid size cap")
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--cin", type=int, default=4)
    p.add_argument("--cout", type=int, default=8)
    p.add_argument("--occupancies", default="0.0,0.02,0.05,0.1,0.2")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_bench_spconv)

    p = sub.add_parser("bench-pipeline", help="overlap vs serial makespan CSV")
    p.add_argument("--specs", default=None,
                   help="semicolon list of chunks:transfer:compute triples")
    p.add_argument("--random", type=int, default=0, help="add N random specs")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_bench_pipeline)

    p = sub.add_parser("graph-opt", help="apply prune/quantize/fuse passes")
    p.add_argument("--graph", required=True, help="input graph JSON")
    p.add_argument("--out", required=True, help="output graph JSON")
    p.add_argument("--prune", type=float, default=None, help="magnitude threshold")
    p.add_argument("--quantize", action="store_true")
    p.add_argument("--fuse", action="store_true")
    p.set_defaults(func=_cmd_graph_opt)

    p = sub.add_parser("ks-test", help="two-sample Kolmogorov-Smirnov test")
    p.add_argument("sample_a", help="single-column numeric text file")
    p.add_argument("sample_b", help="single-column numeric text file")
    p.set_defaults(func=_cmd_ks_test)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (VoxmoeError, OSError, ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
