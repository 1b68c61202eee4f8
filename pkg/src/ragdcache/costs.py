"""Analytic timing model standing in for GPU execution.

Prefill over n tokens costs ``layers * n^2 * hidden_dim`` work units; a
device's ``compute_rate`` converts work units to seconds.  When a context
prefix of ``n_cached`` tokens arrives as a precomputed KV cache, only the new
tokens attend (over the whole context), so the work drops to
``layers * n_new * (n_new + n_cached) * hidden_dim``.  Storage loads are
seek-plus-bandwidth for disk and pure bandwidth for memory.

All times are seconds as 64-bit floats.  Everything here is a pure function;
call from as many threads as you like.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .codec import ModelProfile
from .store import LookupResult, Outcome


class DeviceKind(Enum):
    INFERENCE_GPU = "inference_gpu"
    GENERATOR_GPU = "generator_gpu"
    CPU = "cpu"


class Configuration(Enum):
    """Resource split for a serving deployment.

    A dedicates one GPU to cache generation and serves on the other; B serves
    on both GPUs and generates on the CPU; BASELINE serves on both GPUs with
    no cache machinery at all.
    """

    BASELINE = "baseline"
    A = "a"
    B = "b"
    SINGLE_INSTANCE = "single_instance"


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    kind: DeviceKind
    compute_rate: float  # work units per second
    concurrency: int = 1

    def __post_init__(self) -> None:
        if self.compute_rate <= 0:
            raise ValueError("compute_rate must be positive")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")


class Tier(Enum):
    DISK = "disk"
    MEMORY = "memory"


@dataclass(frozen=True)
class CostParams:
    model: ModelProfile
    disk_read_bw: float = 3.4e9       # bytes/s
    disk_write_bw: float = 2.4e9      # bytes/s
    disk_seek: float = 1.0e-3         # seconds
    mem_bw: float = 2.0e10            # bytes/s
    network_delay: float = 5.0e-3     # seconds, one constant hop per query
    decode_enabled: bool = False
    decode_time_per_token: float = 0.0

    def __post_init__(self) -> None:
        for name in ("disk_read_bw", "disk_write_bw", "mem_bw"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("disk_seek", "network_delay", "decode_time_per_token"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def prefill_work(layers: int, hidden_dim: int, n_total: int) -> int:
    """Work units to prefill ``n_total`` tokens from raw text."""
    if n_total < 0:
        raise ValueError("n_total must be >= 0")
    return layers * n_total * n_total * hidden_dim


def cached_prefill_work(layers: int, hidden_dim: int, n_query: int, n_cached: int) -> int:
    """Work units when ``n_cached`` context tokens arrive as a KV cache.

    New tokens attend over the full context; cached tokens cost nothing.
    Never exceeds ``prefill_work`` of the combined length.
    """
    if n_query < 1:
        raise ValueError("n_query must be >= 1")
    if n_cached < 0:
        raise ValueError("n_cached must be >= 0")
    return layers * n_query * (n_query + n_cached) * hidden_dim


def load_time(n_bytes: int, tier: Tier, params: CostParams) -> float:
    """Seconds to bring ``n_bytes`` of cache into the model's working memory."""
    if n_bytes < 0:
        raise ValueError("n_bytes must be >= 0")
    if tier is Tier.DISK:
        return params.disk_seek + n_bytes / params.disk_read_bw
    return n_bytes / params.mem_bw


@dataclass(frozen=True)
class TtftBreakdown:
    kv_load: float
    prefill: float

    @property
    def total(self) -> float:
        return self.kv_load + self.prefill


def ttft(
    params: CostParams,
    device: DeviceProfile,
    n_query: int,
    n_cached_tokens: int,
    lookup: LookupResult,
) -> tuple[float, TtftBreakdown]:
    """Seconds from dispatch to first token, with its load/prefill split.

    On a miss the would-be cached tokens are plain text and join the
    prefill; on a hit the cache is loaded from the tier the lookup reports
    and only the query tokens are prefilled.  Queueing and the network hop
    are accounted by the caller.
    """
    model = params.model
    if lookup.outcome is Outcome.MISS:
        work = prefill_work(model.layers, model.hidden_dim, n_query + n_cached_tokens)
        breakdown = TtftBreakdown(kv_load=0.0, prefill=work / device.compute_rate)
    else:
        tier = Tier.MEMORY if lookup.outcome is Outcome.MEMORY_HIT else Tier.DISK
        kv_load = load_time(lookup.load_cost_bytes, tier, params)
        work = cached_prefill_work(model.layers, model.hidden_dim, n_query, n_cached_tokens)
        breakdown = TtftBreakdown(kv_load=kv_load, prefill=work / device.compute_rate)
    return breakdown.total, breakdown
