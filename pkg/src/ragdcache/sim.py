"""Deterministic discrete-event simulator of the multi-instance serving system.

One central FIFO queue feeds the inference instances.  A query's service time
comes from the cost model applied to the cache state at its dispatch instant:
the longest cached prefix of its retrieved document combination is loaded and
the remaining tokens prefill from raw text.  A background generator device
(present in configurations A and B) produces caches for queries that waited
past the flag threshold, one generation per distinct prefix system-wide.

The clock is simulated; identical (config, workload) inputs give bit-identical
records.  Each pass over the workload (a "try") replays the same items in a
new seeded order with fresh arrival times; the disk cache persists across
tries, which is what drives hit ratios up and latency down from try to try.
"""

from __future__ import annotations

import heapq
import json
import statistics
from collections import OrderedDict, deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from . import codec
from .costs import (
    Configuration,
    CostParams,
    DeviceKind,
    DeviceProfile,
    cached_prefill_work,
    load_time,
    prefill_work,
    Tier,
)
from .workload import WorkItem, poissonize, uniform_arrivals


class ArrivalProcess(Enum):
    POISSON = "poisson"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class ArrivalSpec:
    rate: float
    process: ArrivalProcess = ArrivalProcess.POISSON

    def __post_init__(self) -> None:
        if self.rate <= 0:
            raise ValueError("arrival rate must be positive")


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    configuration: Configuration
    devices: tuple[DeviceProfile, ...]
    cost: CostParams
    arrival: ArrivalSpec
    k: int = 1
    tries: int = 1
    seed: int = 0
    threshold: float = 1.0
    memory_capacity_bytes: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise TopologyError("k must be >= 1")
        if self.tries < 1:
            raise TopologyError("tries must be >= 1")
        if self.threshold < 0:
            raise TopologyError("threshold must be >= 0")
        kinds = [d.kind for d in self.devices]
        n_inf = kinds.count(DeviceKind.INFERENCE_GPU)
        n_gen = kinds.count(DeviceKind.GENERATOR_GPU)
        n_cpu = kinds.count(DeviceKind.CPU)
        cfg = self.configuration
        if cfg is Configuration.BASELINE and not (n_inf == 2 and n_gen == 0):
            raise TopologyError("baseline needs exactly 2 inference GPUs and no generator")
        if cfg is Configuration.A and not (n_inf == 1 and n_gen == 1):
            raise TopologyError("configuration A needs 1 inference GPU and 1 generator GPU")
        if cfg is Configuration.B and not (n_inf == 2 and n_cpu >= 1 and n_gen == 0):
            raise TopologyError("configuration B needs 2 inference GPUs and a CPU generator")
        if cfg is Configuration.SINGLE_INSTANCE and n_inf != 1:
            raise TopologyError("single-instance needs exactly 1 inference GPU")

    @property
    def instances(self) -> tuple[DeviceProfile, ...]:
        return tuple(d for d in self.devices if d.kind is DeviceKind.INFERENCE_GPU)

    @property
    def generator(self) -> DeviceProfile | None:
        wanted = {
            Configuration.A: DeviceKind.GENERATOR_GPU,
            Configuration.B: DeviceKind.CPU,
        }.get(self.configuration)
        if wanted is None:
            return None
        for d in self.devices:
            if d.kind is wanted:
                return d
        return None

    @property
    def prefetch_enabled(self) -> bool:
        return self.generator is not None


class ComboOrigin(Enum):
    MEMORY_HIT = "memory_hit"
    DISK_HIT = "disk_hit"
    GENERATED = "generated"
    MISS_RAW = "miss_raw"


@dataclass(frozen=True)
class QueryRecord:
    query_id: int
    try_index: int
    instance_id: str
    arrival: float
    dispatch: float
    first_token: float
    queue_wait: float
    kv_load: float
    prefill: float
    network_delay: float
    origins: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "try_index": self.try_index,
            "instance_id": self.instance_id,
            "arrival": self.arrival,
            "dispatch": self.dispatch,
            "first_token": self.first_token,
            "queue_wait": self.queue_wait,
            "kv_load": self.kv_load,
            "prefill": self.prefill,
            "network_delay": self.network_delay,
            "origins": list(self.origins),
        }


@dataclass(frozen=True)
class TrySummary:
    try_index: int
    completed: int
    makespan: float
    throughput: float
    latency_mean: float
    latency_median: float
    latency_p95: float
    ttft_mean: float
    memory_hit_ratio: float
    disk_hit_ratio: float
    miss_ratio: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class MetricsReport:
    completed: int
    makespan: float
    throughput: float
    latency_mean: float
    latency_median: float
    latency_p95: float
    ttft_mean: float
    kv_load_mean: float
    prefill_mean: float
    memory_hit_ratio: float
    disk_hit_ratio: float
    miss_ratio: float
    origin_counts: dict[str, int]
    per_try: tuple[TrySummary, ...]

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "per_try"}
        out["per_try"] = [t.to_dict() for t in self.per_try]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _percentile(values: list[float], q: float) -> float:
    return float(np.percentile(np.asarray(values, dtype=np.float64), q))


def _summarize_records(records: Sequence[QueryRecord], try_index: int | None) -> TrySummary:
    rows = [r for r in records if try_index is None or r.try_index == try_index]
    latencies = [r.first_token - r.arrival for r in rows]
    ttfts = [r.kv_load + r.prefill + r.network_delay for r in rows]
    makespan = max(r.first_token for r in rows) - min(r.arrival for r in rows)
    origin_list = [o for r in rows for o in r.origins]
    total = len(origin_list)
    disk = sum(1 for o in origin_list if o in (ComboOrigin.DISK_HIT.value, ComboOrigin.GENERATED.value))
    mem = sum(1 for o in origin_list if o == ComboOrigin.MEMORY_HIT.value)
    miss = sum(1 for o in origin_list if o == ComboOrigin.MISS_RAW.value)
    return TrySummary(
        try_index=try_index if try_index is not None else -1,
        completed=len(rows),
        makespan=makespan,
        throughput=len(rows) / makespan if makespan > 0 else 0.0,
        latency_mean=statistics.fmean(latencies),
        latency_median=statistics.median(latencies),
        latency_p95=_percentile(latencies, 95),
        ttft_mean=statistics.fmean(ttfts),
        memory_hit_ratio=mem / total if total else 0.0,
        disk_hit_ratio=disk / total if total else 0.0,
        miss_ratio=miss / total if total else 0.0,
    )


def build_report(records: Sequence[QueryRecord], tries: int) -> MetricsReport:
    per_try = tuple(_summarize_records(records, t) for t in range(1, tries + 1))
    makespan = sum(t.makespan for t in per_try)
    latencies = [r.first_token - r.arrival for r in records]
    ttfts = [r.kv_load + r.prefill + r.network_delay for r in records]
    origin_list = [o for r in records for o in r.origins]
    total = len(origin_list)
    counts: dict[str, int] = {}
    for o in origin_list:
        counts[o] = counts.get(o, 0) + 1
    disk = counts.get(ComboOrigin.DISK_HIT.value, 0) + counts.get(ComboOrigin.GENERATED.value, 0)
    return MetricsReport(
        completed=len(records),
        makespan=makespan,
        throughput=len(records) / makespan if makespan > 0 else 0.0,
        latency_mean=statistics.fmean(latencies),
        latency_median=statistics.median(latencies),
        latency_p95=_percentile(latencies, 95),
        ttft_mean=statistics.fmean(ttfts),
        kv_load_mean=statistics.fmean([r.kv_load for r in records]),
        prefill_mean=statistics.fmean([r.prefill for r in records]),
        memory_hit_ratio=counts.get(ComboOrigin.MEMORY_HIT.value, 0) / total if total else 0.0,
        disk_hit_ratio=disk / total if total else 0.0,
        miss_ratio=counts.get(ComboOrigin.MISS_RAW.value, 0) / total if total else 0.0,
        origin_counts=dict(sorted(counts.items())),
        per_try=per_try,
    )


class _CacheSim:
    """Byte-accounted mirror of the store's two tiers, without any I/O."""

    def __init__(self, memory_capacity: int) -> None:
        self.disk: dict[tuple[int, ...], int] = {}
        self.memory: OrderedDict[tuple[int, ...], int] = OrderedDict()
        self.memory_capacity = memory_capacity
        self.memory_used = 0
        # prefix -> (try_index, waiter ids) recorded when generation finishes
        self.gen_meta: dict[tuple[int, ...], tuple[int, frozenset[int]]] = {}

    def tier(self, prefix: tuple[int, ...]) -> Tier | None:
        if prefix in self.memory:
            return Tier.MEMORY
        if prefix in self.disk:
            return Tier.DISK
        return None

    def add_disk(self, prefix: tuple[int, ...], size: int) -> None:
        self.disk.setdefault(prefix, size)

    def promote(self, prefix: tuple[int, ...], size: int) -> None:
        if self.memory_capacity <= 0 or size > self.memory_capacity:
            return
        if prefix in self.memory:
            self.memory.move_to_end(prefix)
            return
        while self.memory_used + size > self.memory_capacity and self.memory:
            _, evicted = self.memory.popitem(last=False)
            self.memory_used -= evicted
        self.memory[prefix] = size
        self.memory_used += size


@dataclass
class _GenTask:
    prefix: tuple[int, ...]
    span_tokens: int
    size_bytes: int
    waiters: set[int] = field(default_factory=set)


class _Generator:
    """FIFO generation queue on one device with bounded concurrency."""

    def __init__(self, device: DeviceProfile, params: CostParams, cache: _CacheSim) -> None:
        self.device = device
        self.params = params
        self.cache = cache
        self.pending: deque[_GenTask] = deque()
        self.registry: dict[tuple[int, ...], _GenTask] = {}
        self.busy_slots = 0

    def request(self, prefix: tuple[int, ...], span_tokens: int, size_bytes: int, waiter: int) -> None:
        if self.cache.tier(prefix) is not None:
            return
        task = self.registry.get(prefix)
        if task is not None:
            task.waiters.add(waiter)
            return
        task = _GenTask(prefix, span_tokens, size_bytes, {waiter})
        self.registry[prefix] = task
        self.pending.append(task)

    def start_ready(self, now: float, schedule) -> None:
        model = self.params.model
        while self.busy_slots < self.device.concurrency and self.pending:
            task = self.pending.popleft()
            work = prefill_work(model.layers, model.hidden_dim, task.span_tokens)
            duration = work / self.device.compute_rate + task.size_bytes / self.params.disk_write_bw
            self.busy_slots += 1
            schedule(now + duration, "gen_done", task)

    def finish(self, task: _GenTask, try_index: int) -> None:
        self.busy_slots -= 1
        self.registry.pop(task.prefix, None)
        self.cache.add_disk(task.prefix, task.size_bytes)
        self.cache.gen_meta[task.prefix] = (try_index, frozenset(task.waiters))


@dataclass
class _QueryState:
    item: WorkItem
    arrival: float
    flagged: bool = False
    dispatched: bool = False


def _arrivals_for_try(
    items: Sequence[WorkItem], config: SimConfig, try_index: int
) -> list[tuple[float, WorkItem]]:
    """Each try replays the same arrival timestamps (seeded once per run)
    against a freshly shuffled item order, so try-over-try differences come
    from the cache, not from a new burst pattern."""
    order_rng = np.random.default_rng([config.seed, try_index, 0x5EED])
    order = order_rng.permutation(len(items))
    shuffled = [items[i] for i in order]
    if config.arrival.process is ArrivalProcess.UNIFORM:
        return uniform_arrivals(shuffled, config.arrival.rate)
    arrival_seed = int(np.random.default_rng([config.seed, 0xA221]).integers(0, 2**63))
    return poissonize(shuffled, config.arrival.rate, seed=arrival_seed)


def run(config: SimConfig, workload: Sequence[WorkItem]) -> tuple[MetricsReport, list[QueryRecord]]:
    """Simulate ``config.tries`` passes over ``workload``; cache state carries
    across passes, the clock and queue reset between them."""
    if not workload:
        raise ValueError("workload must be non-empty")
    for item in workload:
        if item.doc_ids is None:
            raise ValueError("simulation items need pre-resolved doc_ids")
        if len(item.doc_ids) < config.k:
            raise ValueError(f"item {item.query_id} has fewer than k={config.k} docs")

    params = config.cost
    model = params.model
    instances = config.instances
    cache = _CacheSim(config.memory_capacity_bytes)
    generator = (
        _Generator(config.generator, params, cache) if config.prefetch_enabled else None
    )
    records: list[QueryRecord] = []

    def blob_bytes(prefix_len: int, span_tokens: int) -> int:
        return codec.encoded_size(model, span_tokens, prefix_len)

    for try_index in range(1, config.tries + 1):
        arrivals = _arrivals_for_try(workload, config, try_index)
        heap: list[tuple[float, int, str, object]] = []
        seq = 0

        def schedule(time: float, kind: str, payload: object) -> None:
            nonlocal seq
            heapq.heappush(heap, (time, seq, kind, payload))
            seq += 1

        if generator is not None:
            generator.pending.clear()
            generator.registry.clear()
            generator.busy_slots = 0

        queue: deque[_QueryState] = deque()
        instance_free_at = [0.0] * len(instances)
        instance_idle = [True] * len(instances)

        for t, item in arrivals:
            schedule(t, "arrive", item)

        def dispatch_waiting(now: float) -> None:
            while queue:
                idle = [i for i, free in enumerate(instance_idle) if free]
                if not idle:
                    return
                inst = idle[0]
                qs = queue.popleft()
                qs.dispatched = True
                item = qs.item
                combo = item.doc_ids[: config.k]
                tokens = item.doc_tokens[: config.k]
                prefixes = [combo[:j] for j in range(1, config.k + 1)]
                tiers = [cache.tier(p) for p in prefixes]
                best = 0
                for j, tier in enumerate(tiers, start=1):
                    if tier is not None:
                        best = j
                if best > 0:
                    cached_tokens = sum(tokens[:best])
                    new_tokens = item.q_tokens + sum(tokens[best:])
                    size = blob_bytes(best, cached_tokens)
                    tier = tiers[best - 1]
                    if tier is Tier.MEMORY:
                        kv_load = 0.0
                    else:
                        kv_load = load_time(size, Tier.DISK, params)
                    work = cached_prefill_work(model.layers, model.hidden_dim, new_tokens, cached_tokens)
                    cache.promote(prefixes[best - 1], size)
                else:
                    kv_load = 0.0
                    work = prefill_work(
                        model.layers, model.hidden_dim, item.q_tokens + sum(tokens)
                    )
                prefill = work / instances[inst].compute_rate
                busy = kv_load + prefill
                origins = []
                for j, tier in enumerate(tiers, start=1):
                    if tier is None:
                        origins.append(ComboOrigin.MISS_RAW.value)
                        continue
                    meta = cache.gen_meta.get(prefixes[j - 1])
                    if meta is not None and meta[0] == try_index and item.query_id in meta[1]:
                        origins.append(ComboOrigin.GENERATED.value)
                    elif tier is Tier.MEMORY:
                        origins.append(ComboOrigin.MEMORY_HIT.value)
                    else:
                        origins.append(ComboOrigin.DISK_HIT.value)
                records.append(
                    QueryRecord(
                        query_id=item.query_id,
                        try_index=try_index,
                        instance_id=instances[inst].device_id,
                        arrival=qs.arrival,
                        dispatch=now,
                        first_token=now + busy + params.network_delay,
                        queue_wait=now - qs.arrival,
                        kv_load=kv_load,
                        prefill=prefill,
                        network_delay=params.network_delay,
                        origins=tuple(origins),
                    )
                )
                instance_idle[inst] = False
                instance_free_at[inst] = now + busy
                schedule(now + busy, "free", inst)

        pending_arrivals = len(arrivals)
        while heap:
            now, _, kind, payload = heapq.heappop(heap)
            if kind == "arrive":
                item = payload
                pending_arrivals -= 1
                qs = _QueryState(item=item, arrival=now)
                queue.append(qs)
                if generator is not None:
                    schedule(now + config.threshold, "flag", qs)
                dispatch_waiting(now)
            elif kind == "flag":
                qs = payload
                if qs.dispatched or qs.flagged:
                    continue
                qs.flagged = True
                item = qs.item
                tokens = item.doc_tokens[: config.k]
                for j in range(1, config.k + 1):
                    prefix = item.doc_ids[:j]
                    span = sum(tokens[:j])
                    generator.request(prefix, span, blob_bytes(j, span), item.query_id)
                generator.start_ready(now, schedule)
            elif kind == "gen_done":
                generator.finish(payload, try_index)
                generator.start_ready(now, schedule)
            elif kind == "free":
                inst = payload
                instance_idle[inst] = True
                dispatch_waiting(now)
            # the pass ends with its last completion; generation still in
            # flight is abandoned rather than granted free time between tries
            if pending_arrivals == 0 and not queue and all(instance_idle):
                break

    return build_report(records, config.tries), records


# -- single-instance batch mode ----------------------------------------------


def run_single_instance(
    config: SimConfig,
    workload: Sequence[WorkItem],
    batch_size: int = 1,
    use_cache: bool = True,
    decode_tokens: int = 0,
) -> tuple[MetricsReport, list[QueryRecord]]:
    """Closed-loop batched serving on one instance.

    Queries are processed in arrival order in groups of ``batch_size``; a
    batch's prefill work is the sum of its members' work, and every member's
    first token arrives when the batch finishes.  With ``use_cache`` the
    per-document caches are assumed precomputed (offline preparation), so
    each member loads its combination prefix and prefills only new tokens.
    """
    if config.configuration is not Configuration.SINGLE_INSTANCE:
        raise TopologyError("run_single_instance needs a SINGLE_INSTANCE config")
    if not 1 <= batch_size <= 32:
        raise ValueError("batch_size must be in 1..32")
    if not workload:
        raise ValueError("workload must be non-empty")

    params = config.cost
    model = params.model
    device = config.instances[0]
    cache = _CacheSim(config.memory_capacity_bytes)
    if use_cache:
        for item in workload:
            for doc, tok in zip(item.doc_ids, item.doc_tokens):
                cache.add_disk((doc,), codec.encoded_size(model, tok, 1))

    records: list[QueryRecord] = []
    now = 0.0
    for start in range(0, len(workload), batch_size):
        batch = workload[start : start + batch_size]
        batch_load = 0.0
        batch_work = 0
        for item in batch:
            combo = item.doc_ids
            tokens = item.doc_tokens
            prefixes = [combo[:j] for j in range(1, len(combo) + 1)]
            best = 0
            for j, p in enumerate(prefixes, start=1):
                if cache.tier(p) is not None:
                    best = j
            if best > 0:
                cached_tokens = sum(tokens[:best])
                size = codec.encoded_size(model, cached_tokens, best)
                tier = cache.tier(prefixes[best - 1])
                if tier is Tier.DISK:
                    batch_load += load_time(size, Tier.DISK, params)
                cache.promote(prefixes[best - 1], size)
                batch_work += cached_prefill_work(
                    model.layers, model.hidden_dim,
                    item.q_tokens + sum(tokens[best:]), cached_tokens,
                )
            else:
                batch_work += prefill_work(
                    model.layers, model.hidden_dim, item.q_tokens + sum(tokens)
                )
        batch_prefill = batch_work / device.compute_rate
        batch_time = batch_load + batch_prefill
        if params.decode_enabled and decode_tokens > 0:
            batch_time += decode_tokens * params.decode_time_per_token
        for item in batch:
            records.append(
                QueryRecord(
                    query_id=item.query_id,
                    try_index=1,
                    instance_id=device.device_id,
                    arrival=now,
                    dispatch=now,
                    first_token=now + batch_load + batch_prefill + params.network_delay,
                    queue_wait=0.0,
                    kv_load=batch_load,
                    prefill=batch_prefill,
                    network_delay=params.network_delay,
                    origins=tuple(
                        ComboOrigin.DISK_HIT.value if use_cache else ComboOrigin.MISS_RAW.value
                        for _ in item.doc_ids
                    ),
                )
            )
        now += batch_time

    report = build_report(records, tries=1)
    # closed-loop: makespan is busy time, not bounded by arrivals
    return replace(report, makespan=now, throughput=len(records) / now), records


# -- rate sweep ----------------------------------------------------------------


@dataclass(frozen=True)
class RatePoint:
    rate: float
    queue_wait_mean: float
    processing_mean: float
    network_mean: float
    latency_mean: float

    @property
    def queue_wait_share(self) -> float:
        return self.queue_wait_mean / self.latency_mean if self.latency_mean else 0.0

    @property
    def processing_share(self) -> float:
        return self.processing_mean / self.latency_mean if self.latency_mean else 0.0

    def to_dict(self) -> dict:
        return {
            "rate": self.rate,
            "queue_wait_mean": self.queue_wait_mean,
            "processing_mean": self.processing_mean,
            "network_mean": self.network_mean,
            "latency_mean": self.latency_mean,
            "queue_wait_share": self.queue_wait_share,
            "processing_share": self.processing_share,
        }


def sweep_rate(config: SimConfig, rates: Sequence[float], workload: Sequence[WorkItem]) -> list[RatePoint]:
    """Latency decomposition at each arrival rate (fresh state per rate)."""
    if list(rates) != sorted(rates):
        raise ValueError("rates must be sorted ascending")
    points = []
    for rate in rates:
        cfg = replace(config, arrival=replace(config.arrival, rate=rate), tries=1)
        _, records = run(cfg, workload)
        waits = statistics.fmean(r.queue_wait for r in records)
        processing = statistics.fmean(r.kv_load + r.prefill for r in records)
        network = statistics.fmean(r.network_delay for r in records)
        latency = statistics.fmean(r.first_token - r.arrival for r in records)
        points.append(RatePoint(rate, waits, processing, network, latency))
    return points


def service_capacity(config: SimConfig, workload: Sequence[WorkItem]) -> float:
    """Queries/s the instances can sustain with every request missing the
    cache (the conservative planning figure)."""
    model = config.cost.model
    total_work = sum(
        prefill_work(model.layers, model.hidden_dim, it.q_tokens + sum(it.doc_tokens[: config.k]))
        for it in workload
    )
    mean_busy = total_work / len(workload) / config.instances[0].compute_rate
    return len(config.instances) / mean_busy
