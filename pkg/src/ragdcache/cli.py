"""Command-line entry point.

Subcommands cover the full workflow: building a vector index, precomputing
document caches offline, serving the shared store over a socket, analyzing
query-document locality, and running the benchmark scenarios.  Every
benchmark output directory gets a ``report.json`` (manifest embedded), an
``aggregates.csv``, and rendered figures; identical invocations produce
byte-identical reports.

Exit codes: 0 success, 2 usage, 3 input error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

from . import __version__, codec, config as cfgmod, plots
from .calibrate import derive_config, verify_config, write_config
from .codec import fnv1a64, synth_blob
from .costs import Configuration, Tier, load_time
from .index import ChunkFileError, IndexError_, VectorIndex, build_index, read_chunks_jsonl
from .service import CacheServer, SharedCacheService
from .sim import run, run_single_instance, service_capacity, sweep_rate
from .store import CacheTier, KvStore, StoreError, key_for
from .workload import TraceError, load_trace, locality_curve, zipf_stream

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_RUNTIME = 4

SCENARIOS = {
    "baseline": Configuration.BASELINE,
    "sharedA": Configuration.A,
    "sharedB": Configuration.B,
}


class InputError(Exception):
    pass


@dataclass
class RunManifest:
    """Reproducibility header embedded in every benchmark output."""

    command: str
    args: dict[str, Any]
    seed: int
    config_hash: str
    input_hash: str | None
    outputs: list[str]
    tool: str = "ragdcache"
    version: str = __version__

    def to_dict(self) -> dict[str, Any]:
        return {
            "tool": self.tool,
            "version": self.version,
            "command": self.command,
            "args": self.args,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "input_hash": self.input_hash,
            "outputs": self.outputs,
        }


def _config_hash(cfg: dict[str, Any]) -> str:
    return f"{fnv1a64(json.dumps(cfg, sort_keys=True).encode()):016x}"


def _file_hash(path: str | Path | None) -> str | None:
    if path is None:
        return None
    return f"{fnv1a64(Path(path).read_bytes()):016x}"


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _store_dir(args) -> Path:
    store = getattr(args, "store", None) or os.environ.get(cfgmod.ENV_STORE)
    if not store:
        raise InputError("no store directory: pass --store or set RAGDCACHE_STORE")
    return Path(store)


def _bench_workload(cfg: dict[str, Any], args, k: int, doc_tokens_key: str = "doc_tokens"):
    wl = cfgmod.workload_params(cfg)
    if getattr(args, "trace", None):
        items = load_trace(args.trace)
        short = [it for it in items if len(it.doc_ids) < k]
        if short:
            raise InputError(f"trace items with fewer than k={k} docs: {[it.query_id for it in short[:5]]}")
        return items
    return zipf_stream(
        int(wl["n_docs"]),
        float(wl["zipf_s"]),
        int(getattr(args, "queries", None) or wl["n_queries"]),
        seed=args.seed,
        k=k,
        q_tokens=int(wl["q_tokens"]),
        doc_tokens=int(wl[doc_tokens_key]),
    )


# -- subcommands ---------------------------------------------------------------


def cmd_build_index(args) -> int:
    try:
        index = build_index(read_chunks_jsonl(args.chunks))
    except (ChunkFileError, IndexError_, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    index.save(args.out)
    print(f"indexed {len(index)} chunks (dim {index.dim}) -> {args.out}")
    return EXIT_OK


def cmd_precompute(args) -> int:
    cfg = cfgmod.load_config(args.config)
    try:
        profile = cfgmod.model_profile(cfg, args.model)
        chunks = list(read_chunks_jsonl(args.chunks))
    except (KeyError, ChunkFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if not chunks:
        print("error: empty chunk file", file=sys.stderr)
        return EXIT_INPUT

    store = KvStore(_store_dir(args), memory_capacity_bytes=0)
    new_blobs = 0
    payload_bytes = 0
    encoded_bytes = 0
    failed: list[int] = []
    for chunk in chunks:
        key = key_for(profile, [chunk.doc_id])
        payload_bytes += codec.blob_size(profile, chunk.token_count)
        encoded_bytes += codec.encoded_size(profile, chunk.token_count, 1)
        try:
            if store.contains(key) is CacheTier.ABSENT:
                store.put(key, synth_blob(profile, [chunk.doc_id], chunk.token_count, seed=args.seed))
                new_blobs += 1
        except StoreError:
            failed.append(chunk.doc_id)
    print(f"model {args.model}: {len(chunks)} chunks, {new_blobs} new blobs")
    print(f"total payload bytes: {payload_bytes}")
    print(f"total encoded bytes: {encoded_bytes} ({encoded_bytes / 1e9:.2f} GB)")
    if failed:
        print(f"failed doc_ids: {failed}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_serve(args) -> int:
    store = KvStore(_store_dir(args), memory_capacity_bytes=args.memory_capacity)
    service = SharedCacheService(store)
    host, _, port = args.listen.rpartition(":")
    server = CacheServer(service.store, host=host or "127.0.0.1", port=int(port)).start()
    print(f"serving cache store on {server.address[0]}:{server.address[1]} (ctrl-c to stop)")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def cmd_analyze_locality(args) -> int:
    try:
        items = load_trace(args.trace)
    except (TraceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    trace = [(it.query_id, it.doc_ids[0]) for it in items]
    curve = locality_curve(trace, corpus_size=args.corpus_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    csv_path = out / "locality.csv"
    _write_csv(csv_path, ("rank_fraction", "coverage"), [(f"{x:.8f}", f"{y:.8f}") for x, y in curve.points])
    outputs = [csv_path.name]
    if not args.no_plots:
        outputs += [p.name for p in plots.render_locality(curve, out)]
    manifest = RunManifest(
        command="analyze-locality",
        args={"trace": str(args.trace), "corpus_size": curve.corpus_size},
        seed=0,
        config_hash="",
        input_hash=_file_hash(args.trace),
        outputs=outputs,
    )
    _write_json(out / "manifest.json", manifest.to_dict())
    half = curve.coverage_at(0.5)
    print(f"{len(trace)} queries over corpus of {curve.corpus_size} docs")
    print(f"coverage_at(0.5) = {half:.4f} ({half:.1%} of documents cover half the queries)")
    return EXIT_OK


def _shared_bench(args, cfg: dict[str, Any], out: Path) -> int:
    configuration = SCENARIOS[args.scenario]
    sim_cfg = cfgmod.shared_sim_config(
        cfg, configuration, k=args.k, rate=args.rate, tries=args.tries, seed=args.seed
    )
    items = _bench_workload(cfg, args, args.k)
    report, records = run(sim_cfg, items)

    rows = []
    for t in report.per_try:
        rows.append((f"try-{t.try_index}", t.completed, f"{t.makespan:.6f}", f"{t.throughput:.6f}",
                     f"{t.latency_mean:.6f}", f"{t.latency_median:.6f}", f"{t.latency_p95:.6f}",
                     f"{t.ttft_mean:.6f}", f"{t.memory_hit_ratio:.6f}", f"{t.disk_hit_ratio:.6f}",
                     f"{t.miss_ratio:.6f}"))
    rows.append(("overall", report.completed, f"{report.makespan:.6f}", f"{report.throughput:.6f}",
                 f"{report.latency_mean:.6f}", f"{report.latency_median:.6f}",
                 f"{report.latency_p95:.6f}", f"{report.ttft_mean:.6f}",
                 f"{report.memory_hit_ratio:.6f}", f"{report.disk_hit_ratio:.6f}",
                 f"{report.miss_ratio:.6f}"))
    _write_csv(
        out / "aggregates.csv",
        ("scope", "completed", "makespan_s", "throughput_qps", "latency_mean_s",
         "latency_median_s", "latency_p95_s", "ttft_mean_s", "memory_hit_ratio",
         "disk_hit_ratio", "miss_ratio"),
        rows,
    )
    outputs = ["aggregates.csv", "report.json"]
    if not args.no_plots:
        outputs += [p.name for p in plots.render_try_trend(report, out)]

    manifest = RunManifest(
        command="bench",
        args={"scenario": args.scenario, "k": args.k, "rate": sim_cfg.arrival.rate,
              "tries": sim_cfg.tries, "queries": len(items), "trace": getattr(args, "trace", None)},
        seed=args.seed,
        config_hash=_config_hash(cfg),
        input_hash=_file_hash(getattr(args, "trace", None)),
        outputs=sorted(outputs),
    )
    _write_json(out / "report.json", {
        "manifest": manifest.to_dict(),
        "metrics": report.to_dict(),
        "records": [r.to_dict() for r in records],
    })
    _write_json(out / "manifest.json", manifest.to_dict())
    print(f"{args.scenario} k={args.k}: throughput {report.throughput:.2f} q/s, "
          f"mean latency {report.latency_mean:.2f} s, disk hit ratio {report.disk_hit_ratio:.3f}")
    return EXIT_OK


def _single_bench(args, cfg: dict[str, Any], out: Path) -> int:
    profiles = cfg["sim"]["single_instance_profiles"]
    batches = cfgmod.batch_sizes(cfg)
    items = _bench_workload(cfg, args, k=1, doc_tokens_key="single_instance_doc_tokens")

    cells = []
    summary = {}
    for name in profiles:
        sim_cfg = cfgmod.single_sim_config(cfg, name, seed=args.seed)
        per_mode: dict[bool, list[float]] = {False: [], True: []}
        for cached in (False, True):
            for batch in batches:
                report, _ = run_single_instance(sim_cfg, items, batch_size=batch, use_cache=cached)
                cells.append({
                    "model": name, "batch_size": batch, "cached": cached,
                    "throughput": report.throughput, "ttft_mean": report.ttft_mean,
                    "kv_load_mean": report.kv_load_mean, "prefill_mean": report.prefill_mean,
                })
                per_mode[cached].append(report.throughput)
        base = sum(per_mode[False]) / len(per_mode[False])
        cached_thr = sum(per_mode[True]) / len(per_mode[True])
        summary[name] = {
            "baseline_throughput": base,
            "cached_throughput": cached_thr,
            "uplift": cached_thr / base - 1,
        }

    _write_csv(
        out / "aggregates.csv",
        ("model", "batch_size", "cached", "throughput_qps", "ttft_mean_s",
         "kv_load_mean_s", "prefill_mean_s"),
        [(c["model"], c["batch_size"], int(c["cached"]), f"{c['throughput']:.6f}",
          f"{c['ttft_mean']:.6f}", f"{c['kv_load_mean']:.6f}", f"{c['prefill_mean']:.6f}")
         for c in cells],
    )
    outputs = ["aggregates.csv", "report.json"]
    if not args.no_plots:
        outputs += [p.name for p in plots.render_single_breakdown(cells, out)]
    manifest = RunManifest(
        command="bench",
        args={"scenario": "single", "batches": list(batches), "queries": len(items)},
        seed=args.seed,
        config_hash=_config_hash(cfg),
        input_hash=_file_hash(getattr(args, "trace", None)),
        outputs=sorted(outputs),
    )
    _write_json(out / "report.json", {
        "manifest": manifest.to_dict(),
        "cells": cells,
        "summary": summary,
    })
    _write_json(out / "manifest.json", manifest.to_dict())
    for name, row in summary.items():
        print(f"{name}: {row['baseline_throughput']:.2f} -> {row['cached_throughput']:.2f} q/s "
              f"({row['uplift']:+.1%})")
    return EXIT_OK


def _real_io_bench(args, cfg: dict[str, Any], out: Path) -> int:
    """Wall-clock disk loads against a real store; load times are measured,
    prefill stays modeled.  Not deterministic, excluded from golden checks."""
    store = KvStore(_store_dir(args), memory_capacity_bytes=0)
    profile = cfgmod.model_profile(cfg, cfg["sim"]["single_instance_profiles"][0])
    sim_cfg = cfgmod.single_sim_config(cfg, profile.model_id, seed=args.seed)
    items = _bench_workload(cfg, args, k=1, doc_tokens_key="single_instance_doc_tokens")

    rows = []
    missing = 0
    for item in items:
        key = key_for(profile, [item.doc_ids[0]])
        t0 = time.perf_counter()
        result = store.get(key)
        elapsed = time.perf_counter() - t0
        if result.blob is None:
            missing += 1
            continue
        from .costs import cached_prefill_work
        prefill = cached_prefill_work(
            profile.layers, profile.hidden_dim, item.q_tokens, item.doc_tokens[0]
        ) / sim_cfg.instances[0].compute_rate
        rows.append((item.query_id, f"{elapsed:.6f}", f"{prefill:.6f}", f"{elapsed + prefill:.6f}"))
    if not rows:
        print("error: no cached blobs found; run precompute into this store first", file=sys.stderr)
        return EXIT_INPUT
    _write_csv(out / "real_io.csv", ("query_id", "kv_load_s", "prefill_s", "ttft_s"), rows)
    print(f"measured {len(rows)} real loads ({missing} missing keys) -> {out / 'real_io.csv'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = cfgmod.load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.real_io:
        if args.scenario != "single":
            print("error: --real-io applies to the single scenario only", file=sys.stderr)
            return EXIT_USAGE
        return _real_io_bench(args, cfg, out)
    if args.scenario == "single":
        return _single_bench(args, cfg, out)
    return _shared_bench(args, cfg, out)


def cmd_sweep_rate(args) -> int:
    cfg = cfgmod.load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rates = (
        [float(r) for r in args.rates.split(",")] if args.rates else list(cfgmod.sweep_rates(cfg))
    )
    sim_cfg = cfgmod.shared_sim_config(cfg, Configuration.BASELINE, k=args.k, seed=args.seed, tries=1)
    items = _bench_workload(cfg, args, args.k)
    points = sweep_rate(sim_cfg, rates, items)
    capacity = service_capacity(sim_cfg, items)

    _write_csv(
        out / "sweep.csv",
        ("rate_qps", "queue_wait_mean_s", "processing_mean_s", "network_mean_s",
         "latency_mean_s", "queue_wait_share", "processing_share"),
        [(p.rate, f"{p.queue_wait_mean:.6f}", f"{p.processing_mean:.6f}", f"{p.network_mean:.6f}",
          f"{p.latency_mean:.6f}", f"{p.queue_wait_share:.6f}", f"{p.processing_share:.6f}")
         for p in points],
    )
    outputs = ["sweep.csv"]
    if not args.no_plots:
        outputs += [p.name for p in plots.render_sweep(points, out)]
    manifest = RunManifest(
        command="sweep-rate",
        args={"rates": rates, "k": args.k, "service_capacity": capacity},
        seed=args.seed,
        config_hash=_config_hash(cfg),
        input_hash=None,
        outputs=sorted(outputs),
    )
    _write_json(out / "manifest.json", manifest.to_dict())
    print(f"service capacity ~ {capacity:.2f} q/s; swept {len(points)} rates -> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = derive_config(verbose=True)
    if not args.skip_verify:
        failures = verify_config(cfg, verbose=True)
        if failures:
            for f in failures:
                print(f"calibration check failed: {f}", file=sys.stderr)
            return EXIT_RUNTIME
    paths = [Path(args.out)]
    packaged = Path(__file__).parent / "data" / "paper.json"
    if packaged.exists() and packaged.resolve() != Path(args.out).resolve():
        paths.append(packaged)
    write_config(cfg, paths)
    print(f"wrote {', '.join(str(p) for p in paths)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragdcache",
        description="Disk-backed shared KV-cache store and serving simulator.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", default=None, help="defaults file (JSON); falls back to "
                        "$RAGDCACHE_CONFIG, then the packaged calibration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", help="build a vector index from a JSONL chunk file")
    p.add_argument("--chunks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_index)

    p = sub.add_parser("precompute", help="generate and store document caches offline")
    p.add_argument("--chunks", required=True)
    p.add_argument("--model", required=True, help="model profile name from the config")
    p.add_argument("--store", default=None, help="store directory (default $RAGDCACHE_STORE)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_precompute)

    p = sub.add_parser("serve", help="serve a cache store over the socket protocol")
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--store", default=None)
    p.add_argument("--memory-capacity", type=int, default=0, help="memory tier bytes (0 disables)")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("analyze-locality", help="query-document locality CDF from a trace")
    p.add_argument("trace")
    p.add_argument("--corpus-size", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(fn=cmd_analyze_locality)

    p = sub.add_parser("bench", help="run a benchmark scenario")
    p.add_argument("--scenario", required=True, choices=["single", "sharedA", "sharedB", "baseline"])
    p.add_argument("--k", type=int, default=1, choices=[1, 2])
    p.add_argument("--rate", type=float, default=None)
    p.add_argument("--tries", type=int, default=None)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--queries", type=int, default=None)
    p.add_argument("--trace", default=None, help="replay a JSONL trace instead of synthesizing")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--real-io", action="store_true",
                   help="measure wall-clock loads from a real store (single scenario)")
    p.add_argument("--store", default=None)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("sweep-rate", help="latency decomposition across arrival rates")
    p.add_argument("--rates", default=None, help="comma-separated queries/s")
    p.add_argument("--k", type=int, default=1, choices=[1, 2])
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--queries", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(fn=cmd_sweep_rate)

    p = sub.add_parser("calibrate", help="re-derive and write the defaults file")
    p.add_argument("--out", default="configs/paper.json")
    p.add_argument("--skip-verify", action="store_true")
    p.set_defaults(fn=cmd_calibrate)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TraceError, ChunkFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except KeyboardInterrupt:
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
