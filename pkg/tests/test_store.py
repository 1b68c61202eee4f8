import random

import pytest

from ragdcache import codec
from ragdcache.codec import ModelProfile, synth_blob
from ragdcache.store import (
    CacheTier,
    CorruptBlobError,
    ImmutableEntryError,
    KeyMismatchError,
    KvStore,
    KvKey,
    Outcome,
    key_for,
)

PROFILE = ModelProfile("tiny", layers=1, hidden_dim=4, kv_heads=1, head_dim=4, elem_width=2)


def make_blob(doc_ids, tokens=2, seed=0):
    return synth_blob(PROFILE, doc_ids, tokens, seed=seed)


def make_key(doc_ids):
    return key_for(PROFILE, doc_ids)


ENTRY_SIZE = make_blob([1]).header.encoded_size


class ReferenceLru:
    """Independent byte-accounted LRU model used as the oracle."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.entries = []  # (key, size), least recent first
        self.evictions = 0

    def used(self):
        return sum(s for _, s in self.entries)

    def _evict_until_fits(self, incoming):
        while self.entries and self.used() + incoming > self.capacity:
            self.entries.pop(0)
            self.evictions += 1

    def touch(self, key, size):
        if self.capacity <= 0 or size > self.capacity:
            return
        for i, (k, _) in enumerate(self.entries):
            if k == key:
                self.entries.append(self.entries.pop(i))
                return
        self._evict_until_fits(size)
        self.entries.append((key, size))

    def resident(self):
        return {k for k, _ in self.entries}


class TestPutGet:
    def test_put_then_get_memory_hit(self, tmp_path):
        store = KvStore(tmp_path, memory_capacity_bytes=10 * ENTRY_SIZE)
        blob = make_blob([1])
        store.put(make_key([1]), blob)
        res = store.get(make_key([1]))
        assert res.outcome is Outcome.MEMORY_HIT
        assert res.blob == blob
        assert res.load_cost_bytes == 0

    def test_blob_larger_than_capacity_not_resident(self, tmp_path):
        store = KvStore(tmp_path, memory_capacity_bytes=ENTRY_SIZE - 1)
        blob = make_blob([1])
        store.put(make_key([1]), blob)
        assert store.contains(make_key([1])) is CacheTier.ON_DISK
        res = store.get(make_key([1]))
        assert res.outcome is Outcome.DISK_HIT
        assert res.blob == blob
        assert res.load_cost_bytes == ENTRY_SIZE

    def test_immutability(self, tmp_path):
        store = KvStore(tmp_path, memory_capacity_bytes=0)
        store.put(make_key([1]), make_blob([1], seed=0))
        with pytest.raises(ImmutableEntryError):
            store.put(make_key([1]), make_blob([1], seed=1))

    def test_identical_reput_is_noop(self, tmp_path):
        store = KvStore(tmp_path)
        key, blob = make_key([1]), make_blob([1])
        store.put(key, blob)
        manifest = (tmp_path / "manifest.jsonl").read_text()
        store.put(key, blob)
        assert (tmp_path / "manifest.jsonl").read_text() == manifest

    def test_key_mismatch_rejected(self, tmp_path):
        store = KvStore(tmp_path)
        with pytest.raises(KeyMismatchError):
            store.put(make_key([2]), make_blob([1]))

    def test_absent_key_misses(self, tmp_path):
        store = KvStore(tmp_path)
        res = store.get(make_key([404]))
        assert res.outcome is Outcome.MISS
        assert res.blob is None

    def test_durability_bit_exact(self, tmp_path):
        store = KvStore(tmp_path)
        key, blob = make_key([5, 6]), make_blob([5, 6], tokens=3)
        store.put(key, blob)
        path = tmp_path / f"{key.model_hash:016x}" / f"{key.file_stem}.rdkv"
        assert codec.decode(path.read_bytes()) == blob

    def test_recovery_from_manifest(self, tmp_path):
        store = KvStore(tmp_path)
        for i in range(4):
            store.put(make_key([i + 1]), make_blob([i + 1]))
        reopened = KvStore(tmp_path, memory_capacity_bytes=0)
        assert sorted(k.doc_ids for k in reopened.keys()) == [(1,), (2,), (3,), (4,)]
        assert reopened.get(make_key([2])).outcome is Outcome.DISK_HIT
        assert reopened.stats().disk_bytes_used == store.stats().disk_bytes_used


class TestLru:
    def test_capacity_two_evicts_first(self, tmp_path):
        store = KvStore(tmp_path, memory_capacity_bytes=2 * ENTRY_SIZE)
        for d in (1, 2, 3):
            store.put(make_key([d]), make_blob([d]))
        store.set_memory_capacity(0)
        store.set_memory_capacity(2 * ENTRY_SIZE)
        for d in (1, 2, 3):  # all loads from disk; capacity holds two
            assert store.get(make_key([d])).outcome is Outcome.DISK_HIT
        assert store.get(make_key([1])).outcome is Outcome.DISK_HIT  # evicted by 3

    def test_capacity_three_keeps_first(self, tmp_path):
        store = KvStore(tmp_path, memory_capacity_bytes=3 * ENTRY_SIZE)
        for d in (1, 2, 3):
            store.put(make_key([d]), make_blob([d]))
        store.set_memory_capacity(0)
        store.set_memory_capacity(3 * ENTRY_SIZE)
        for d in (1, 2, 3):
            assert store.get(make_key([d])).outcome is Outcome.DISK_HIT
        assert store.get(make_key([1])).outcome is Outcome.MEMORY_HIT

    def test_capacity_zero_always_disk(self, tmp_path):
        store = KvStore(tmp_path, memory_capacity_bytes=0)
        store.put(make_key([1]), make_blob([1]))
        assert store.get(make_key([1])).outcome is Outcome.DISK_HIT
        assert store.get(make_key([1])).outcome is Outcome.DISK_HIT

    def test_shrink_evicts_in_lru_order(self, tmp_path):
        store = KvStore(tmp_path, memory_capacity_bytes=4 * ENTRY_SIZE)
        for d in (1, 2, 3, 4):
            store.put(make_key([d]), make_blob([d]))
        store.get(make_key([1]))  # 1 becomes most recent
        before = store.stats().evictions
        store.set_memory_capacity(2 * ENTRY_SIZE)
        assert store.stats().evictions == before + 2  # 2 and 3 evicted
        assert store.get(make_key([4])).outcome is Outcome.MEMORY_HIT
        assert store.get(make_key([1])).outcome is Outcome.MEMORY_HIT

    def test_memory_never_exceeds_capacity(self, tmp_path):
        store = KvStore(tmp_path, memory_capacity_bytes=3 * ENTRY_SIZE)
        for d in range(1, 10):
            store.put(make_key([d]), make_blob([d]))
            s = store.stats()
            assert s.memory_bytes_used <= s.memory_capacity_bytes

    def test_lru_law_against_reference(self, tmp_path):
        capacity = 5 * ENTRY_SIZE
        store = KvStore(tmp_path, memory_capacity_bytes=capacity)
        ref = ReferenceLru(capacity)
        keys = list(range(1, 13))
        for d in keys:
            store.put(make_key([d]), make_blob([d]))
            ref.touch(("k", d), ENTRY_SIZE)
        rng = random.Random(7)
        for _ in range(2000):
            d = rng.choice(keys)
            res = store.get(make_key([d]))
            expect_memory = ("k", d) in ref.resident()
            ref.touch(("k", d), ENTRY_SIZE)
            assert (res.outcome is Outcome.MEMORY_HIT) == expect_memory
        assert store.stats().evictions == ref.evictions


class TestStatsAndCorruption:
    def test_counters_exact(self, tmp_path):
        store = KvStore(tmp_path, memory_capacity_bytes=10 * ENTRY_SIZE)
        store.put(make_key([1]), make_blob([1]))
        store.set_memory_capacity(0)
        store.set_memory_capacity(10 * ENTRY_SIZE)
        store.get(make_key([1]))          # disk hit
        store.get(make_key([1]))          # memory hit
        store.get(make_key([1]))          # memory hit
        store.get(make_key([9]))          # miss
        s = store.stats()
        assert (s.memory_hits, s.disk_hits, s.misses) == (2, 1, 1)
        assert s.memory_hits + s.disk_hits + s.misses == 4

    def test_stats_json_fields(self, tmp_path):
        import json
        store = KvStore(tmp_path)
        parsed = json.loads(store.stats().to_json())
        assert set(parsed) >= {"memory_hits", "disk_hits", "misses", "evictions",
                               "memory_bytes_used", "memory_capacity_bytes", "disk_bytes_used"}

    def test_corrupt_blob_quarantined(self, tmp_path):
        store = KvStore(tmp_path, memory_capacity_bytes=0)
        key = make_key([1])
        store.put(key, make_blob([1]))
        path = tmp_path / f"{key.model_hash:016x}" / f"{key.file_stem}.rdkv"
        data = bytearray(path.read_bytes())
        data[-1] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptBlobError):
            store.get(key)
        assert store.stats().corruptions == 1
        assert store.get(key).outcome is Outcome.MISS
        assert path.with_suffix(".rdkv.corrupt").exists()

    def test_contains_states(self, tmp_path):
        store = KvStore(tmp_path, memory_capacity_bytes=10 * ENTRY_SIZE)
        assert store.contains(make_key([1])) is CacheTier.ABSENT
        store.put(make_key([1]), make_blob([1]))
        assert store.contains(make_key([1])) is CacheTier.IN_MEMORY
        store.set_memory_capacity(0)
        assert store.contains(make_key([1])) is CacheTier.ON_DISK

    def test_contains_does_not_count(self, tmp_path):
        store = KvStore(tmp_path)
        store.contains(make_key([1]))
        s = store.stats()
        assert s.memory_hits + s.disk_hits + s.misses == 0


class TestKvKey:
    def test_order_significant(self):
        assert make_key([1, 2]) != make_key([2, 1])
        assert make_key([1, 2]).file_stem != make_key([2, 1]).file_stem

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            KvKey(model_hash=1, doc_ids=())

    def test_structural_equality(self):
        assert make_key([3, 4]) == make_key([3, 4])
