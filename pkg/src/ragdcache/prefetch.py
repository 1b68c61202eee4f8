"""Queue monitoring and proactive cache generation.

When a query has been waiting longer than the configured threshold it gets
flagged: retrieval runs early, and the KV caches for its document combination
are generated on whatever device the deployment dedicates to that work.  A
cache for the ordered combination [d1..dj] is generated for every prefix
level j, each computed from scratch over its combined token span, so any
instance can later use the longest prefix it finds.

Prefetch is strictly best-effort.  A query whose caches are not ready is
served through the ordinary miss path; nothing ever waits on the generator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .codec import ModelProfile, synth_blob
from .costs import Configuration, DeviceKind, DeviceProfile, prefill_work
from .index import VectorIndex
from .service import SharedCacheService
from .store import CacheTier, KvKey

logger = logging.getLogger(__name__)


class PrefetchState(Enum):
    NONE = "none"
    SEARCHING = "searching"
    GENERATING = "generating"
    READY = "ready"


@dataclass
class PendingQuery:
    query_id: int
    arrival_time: float
    k: int
    q_tokens: int
    doc_ids: tuple[int, ...] | None = None
    doc_tokens: tuple[int, ...] | None = None
    embedding: object | None = None
    flagged: bool = False
    prefetch_state: PrefetchState = PrefetchState.NONE

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.doc_ids is None and self.embedding is None:
            raise ValueError("query needs doc_ids or an embedding")


@dataclass(frozen=True)
class PrefetchTask:
    key: KvKey
    assigned_device: DeviceProfile | None
    est_work: int


def scan(queue: Sequence[PendingQuery], now: float, threshold: float) -> list[int]:
    """Flag queries that have waited at least ``threshold``; returns the ids
    flagged by this call.  Re-scanning without time advancing flags nothing,
    and a flag is never withdrawn."""
    newly = []
    for query in queue:
        if not query.flagged and now - query.arrival_time >= threshold:
            query.flagged = True
            newly.append(query.query_id)
    return newly


def assign_device(task: PrefetchTask, config) -> DeviceProfile | None:
    """Device that runs generation under ``config.configuration``:
    the dedicated generator GPU for A, the CPU pool for B, nothing for
    deployments without a generator (prefetch disabled, not an error)."""
    wanted = {
        Configuration.A: DeviceKind.GENERATOR_GPU,
        Configuration.B: DeviceKind.CPU,
    }.get(config.configuration)
    if wanted is None:
        return None
    for device in config.devices:
        if device.kind is wanted:
            return device
    return None


def resolve_docs(query: PendingQuery, index: VectorIndex) -> PendingQuery:
    """Run retrieval for an embedding query; no-op when ids are pre-resolved."""
    if query.doc_ids is not None:
        if query.doc_tokens is None:
            query.doc_tokens = tuple(index.token_count(d) for d in query.doc_ids)
        return query
    query.prefetch_state = PrefetchState.SEARCHING
    hits = index.search(query.embedding, query.k)
    query.doc_ids = tuple(h.doc_id for h in hits)
    query.doc_tokens = tuple(index.token_count(d) for d in query.doc_ids)
    return query


def plan_tasks(
    query: PendingQuery,
    profile: ModelProfile,
    service: SharedCacheService,
    device: DeviceProfile | None,
) -> list[PrefetchTask]:
    """One task per missing prefix combination of the query's documents."""
    assert query.doc_ids is not None and query.doc_tokens is not None
    tasks = []
    for j in range(1, len(query.doc_ids) + 1):
        prefix = query.doc_ids[:j]
        key = KvKey(profile.model_hash, prefix)
        if service.contains(key) is not CacheTier.ABSENT:
            continue
        span = sum(query.doc_tokens[:j])
        tasks.append(
            PrefetchTask(
                key=key,
                assigned_device=device,
                est_work=prefill_work(profile.layers, profile.hidden_dim, span),
            )
        )
    return tasks


def prepare(
    query: PendingQuery,
    index: VectorIndex,
    service: SharedCacheService,
    device: DeviceProfile | None,
    profile: ModelProfile,
    seed: int = 0,
) -> PendingQuery:
    """Advance a flagged query to READY: resolve documents, then generate every
    missing prefix cache through the shared service (duplicates are free).

    Failures reset the state to NONE; the query still runs via the miss path.
    """
    if not query.flagged:
        raise ValueError("only flagged queries are prepared")
    try:
        resolve_docs(query, index)
        query.prefetch_state = PrefetchState.GENERATING
        for task in plan_tasks(query, profile, service, device):
            prefix = task.key.doc_ids
            span = sum(query.doc_tokens[: len(prefix)])
            service.get_or_generate(
                task.key, lambda p=prefix, s=span: synth_blob(profile, p, s, seed=seed)
            )
        query.prefetch_state = PrefetchState.READY
    except Exception:
        logger.exception("prefetch failed for query %s", query.query_id)
        query.prefetch_state = PrefetchState.NONE
    return query
