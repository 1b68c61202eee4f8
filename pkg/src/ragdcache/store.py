"""Two-tier KV-cache storage: durable disk blobs plus a bounded in-memory LRU.

Disk is the source of truth; the memory tier only avoids repeated reads.
Entries are immutable once written (document caches change by delete+put,
and delete is not exposed).  Layout on disk:

    <root>/<model_hash hex16>/<fnv1a64(doc_ids) hex16>.rdkv
    <root>/manifest.jsonl        append-only key -> file map for recovery

Writes go through a temp file and rename, so readers never observe a
partial blob.  Thread-safe; a single lock guards the LRU structure and
counters while file reads happen outside it.
"""

from __future__ import annotations

import json
import os
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from . import codec
from .codec import CodecError, KvBlob, fnv1a64


class StoreError(Exception):
    pass


class KeyMismatchError(StoreError):
    """Blob header does not describe the key it was put under."""


class ImmutableEntryError(StoreError):
    """A different blob already exists for this key."""


class CorruptBlobError(StoreError):
    """On-disk bytes failed to decode; the entry has been quarantined."""


class Outcome(Enum):
    MEMORY_HIT = "memory_hit"
    DISK_HIT = "disk_hit"
    MISS = "miss"


class CacheTier(Enum):
    IN_MEMORY = "in_memory"
    ON_DISK = "on_disk"
    ABSENT = "absent"


@dataclass(frozen=True)
class KvKey:
    """Identity of one cache entry: model plus ordered document combination."""

    model_hash: int
    doc_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.doc_ids:
            raise ValueError("doc_ids must be non-empty")
        object.__setattr__(self, "doc_ids", tuple(int(d) for d in self.doc_ids))

    @property
    def file_stem(self) -> str:
        packed = struct.pack(f"<{len(self.doc_ids)}Q", *self.doc_ids)
        return f"{fnv1a64(packed):016x}"

    def matches(self, blob: KvBlob) -> bool:
        return blob.header.model_hash == self.model_hash and blob.header.doc_ids == self.doc_ids


def key_for(profile: codec.ModelProfile, doc_ids: Sequence[int]) -> KvKey:
    return KvKey(model_hash=profile.model_hash, doc_ids=tuple(doc_ids))


@dataclass(frozen=True)
class LookupResult:
    outcome: Outcome
    blob: KvBlob | None = None
    load_cost_bytes: int = 0


@dataclass
class StoreStats:
    memory_hits: int = 0
    disk_hits: int = 0
    misses: int = 0
    evictions: int = 0
    corruptions: int = 0
    memory_bytes_used: int = 0
    memory_capacity_bytes: int = 0
    disk_bytes_used: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class KvStore:
    """Disk-backed blob store with an LRU memory tier accounted in bytes."""

    def __init__(self, root: str | Path, memory_capacity_bytes: int = 0) -> None:
        if memory_capacity_bytes < 0:
            raise ValueError("memory_capacity_bytes must be >= 0")
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._manifest_path = self.root / "manifest.jsonl"
        self._lock = threading.Lock()
        self._tmp_counter = 0
        # key -> (relative path, encoded size)
        self._disk: dict[KvKey, tuple[str, int]] = {}
        # key -> (blob, encoded size); most-recently-used last
        self._memory: OrderedDict[KvKey, tuple[KvBlob, int]] = OrderedDict()
        self._stats = StoreStats(memory_capacity_bytes=memory_capacity_bytes)
        self._recover()

    # -- recovery ----------------------------------------------------------

    def _recover(self) -> None:
        if not self._manifest_path.exists():
            return
        with open(self._manifest_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                    key = KvKey(int(entry["model_hash"], 16), tuple(entry["doc_ids"]))
                    rel = entry["path"]
                except (KeyError, ValueError, json.JSONDecodeError):
                    continue  # tolerate torn writes at the tail
                path = self.root / rel
                if path.exists():
                    self._disk[key] = (rel, path.stat().st_size)
        self._stats.disk_bytes_used = sum(size for _, size in self._disk.values())

    # -- helpers -----------------------------------------------------------

    def _rel_path(self, key: KvKey) -> str:
        return f"{key.model_hash:016x}/{key.file_stem}.rdkv"

    def _append_manifest(self, key: KvKey, rel: str, size: int) -> None:
        line = json.dumps(
            {"model_hash": f"{key.model_hash:016x}", "doc_ids": list(key.doc_ids),
             "path": rel, "bytes": size},
            sort_keys=True,
        )
        with open(self._manifest_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def _memory_insert(self, key: KvKey, blob: KvBlob, size: int) -> None:
        """Insert under lock, evicting least-recently-used entries by bytes."""
        cap = self._stats.memory_capacity_bytes
        if cap <= 0 or size > cap:
            return
        if key in self._memory:
            self._memory.move_to_end(key)
            return
        while self._stats.memory_bytes_used + size > cap and self._memory:
            _, (_, evicted_size) = self._memory.popitem(last=False)
            self._stats.memory_bytes_used -= evicted_size
            self._stats.evictions += 1
        self._memory[key] = (blob, size)
        self._stats.memory_bytes_used += size

    def _quarantine(self, key: KvKey, rel: str) -> None:
        path = self.root / rel
        try:
            path.rename(path.with_suffix(".rdkv.corrupt"))
        except OSError:
            pass
        with self._lock:
            entry = self._disk.pop(key, None)
            if entry is not None:
                self._stats.disk_bytes_used -= entry[1]
            self._stats.corruptions += 1

    # -- public API --------------------------------------------------------

    def put(self, key: KvKey, blob: KvBlob) -> None:
        """Write durable, then make resident. Idempotent for identical content;
        a different blob under an existing key is rejected."""
        if not key.matches(blob):
            raise KeyMismatchError(
                f"blob header (model {blob.header.model_hash:#x}, docs {blob.header.doc_ids}) "
                f"does not match key (model {key.model_hash:#x}, docs {key.doc_ids})"
            )
        encoded = codec.encode(blob)
        size = len(encoded)
        rel = self._rel_path(key)
        path = self.root / rel

        with self._lock:
            existing = self._disk.get(key)
            if existing is None and key in self._memory:
                existing = (rel, self._memory[key][1])
            self._tmp_counter += 1
            tmp_name = f"{path.name}.tmp.{os.getpid()}.{self._tmp_counter}"

        if existing is not None:
            resident = self._peek_identity(key)
            if resident is not None:
                if resident != (blob.header.payload_len, blob.header.checksum):
                    raise ImmutableEntryError(f"key {key.doc_ids} already holds different content")
                return  # identical re-put: nothing to write

        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.parent / tmp_name
        try:
            with open(tmp, "wb") as fh:
                fh.write(encoded)
            os.replace(tmp, path)
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            raise StoreError(f"write failed for {path}: {exc}") from exc

        with self._lock:
            if key not in self._disk:
                self._stats.disk_bytes_used += size
            self._disk[key] = (rel, size)
            self._memory_insert(key, blob, size)
        self._append_manifest(key, rel, size)

    def _peek_identity(self, key: KvKey) -> tuple[int, int] | None:
        """(payload_len, checksum) of the stored entry, header-only read."""
        with self._lock:
            mem = self._memory.get(key)
            if mem is not None:
                return (mem[0].header.payload_len, mem[0].header.checksum)
            entry = self._disk.get(key)
        if entry is None:
            return None
        rel, _ = entry
        try:
            with open(self.root / rel, "rb") as fh:
                head = fh.read(codec.header_size(len(key.doc_ids)))
            header, _ = codec.decode_header(head)
        except (OSError, CodecError):
            return None
        return (header.payload_len, header.checksum)

    def get(self, key: KvKey) -> LookupResult:
        """Memory hit returns without disk I/O; a disk hit decodes the file,
        promotes the entry to most-recently-used, and reports bytes read."""
        with self._lock:
            mem = self._memory.get(key)
            if mem is not None:
                self._memory.move_to_end(key)
                self._stats.memory_hits += 1
                return LookupResult(Outcome.MEMORY_HIT, mem[0], 0)
            entry = self._disk.get(key)
            if entry is None:
                self._stats.misses += 1
                return LookupResult(Outcome.MISS)
            rel, size = entry

        try:
            data = (self.root / rel).read_bytes()
            blob = codec.decode(data)
        except (OSError, CodecError) as exc:
            self._quarantine(key, rel)
            raise CorruptBlobError(f"{rel}: {exc}") from exc
        if not key.matches(blob):
            # hash collision in the file name; the requested key is absent
            with self._lock:
                self._stats.misses += 1
            return LookupResult(Outcome.MISS)

        with self._lock:
            self._stats.disk_hits += 1
            self._memory_insert(key, blob, len(data))
        return LookupResult(Outcome.DISK_HIT, blob, len(data))

    def contains(self, key: KvKey) -> CacheTier:
        """Observation only: no promotion, no counter changes."""
        with self._lock:
            if key in self._memory:
                return CacheTier.IN_MEMORY
            if key in self._disk:
                return CacheTier.ON_DISK
            return CacheTier.ABSENT

    def keys(self) -> list[KvKey]:
        with self._lock:
            return list(self._disk)

    def stats(self) -> StoreStats:
        with self._lock:
            return StoreStats(**asdict(self._stats))

    def set_memory_capacity(self, capacity_bytes: int) -> None:
        """Lowering the capacity evicts immediately in LRU order; zero
        disables the memory tier entirely."""
        if capacity_bytes < 0:
            raise ValueError("capacity must be >= 0")
        with self._lock:
            self._stats.memory_capacity_bytes = capacity_bytes
            while self._memory and self._stats.memory_bytes_used > capacity_bytes:
                _, (_, size) = self._memory.popitem(last=False)
                self._stats.memory_bytes_used -= size
                self._stats.evictions += 1
