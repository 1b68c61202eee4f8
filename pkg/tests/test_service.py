import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest
from hypothesis import given, settings, strategies as st

from ragdcache.codec import ModelProfile, synth_blob
from ragdcache.service import (
    CacheClient,
    CacheServer,
    ERR_MALFORMED,
    ERR_OVERSIZE,
    OP_ERROR,
    OP_GET,
    Origin,
    ProtocolError,
    RemoteCacheError,
    SharedCacheService,
    TransportError,
    client_get,
    decode_key,
    encode_key,
    recv_frame,
    send_frame,
    serve,
)
from ragdcache.store import CacheTier, KvStore, KvKey, Outcome, key_for

PROFILE = ModelProfile("tiny", layers=1, hidden_dim=4, kv_heads=1, head_dim=4, elem_width=2)


def make_blob(doc_ids, tokens=2, seed=0):
    return synth_blob(PROFILE, doc_ids, tokens, seed=seed)


def make_key(doc_ids):
    return key_for(PROFILE, doc_ids)


@pytest.fixture
def service(tmp_path):
    return SharedCacheService(KvStore(tmp_path, memory_capacity_bytes=1 << 20))


class TestGetOrGenerate:
    def test_disk_hit_skips_generator(self, tmp_path):
        service = SharedCacheService(KvStore(tmp_path, memory_capacity_bytes=0))
        key, blob = make_key([1]), make_blob([1])
        service.put(key, blob)
        called = []
        out, origin = service.get_or_generate(key, lambda: called.append(1) or blob)
        assert origin is Origin.DISK_HIT
        assert out == blob
        assert not called

    def test_generated_is_durable(self, service):
        key = make_key([2])
        blob, origin = service.get_or_generate(key, lambda: make_blob([2]))
        assert origin is Origin.GENERATED
        assert service.contains(key) is not CacheTier.ABSENT
        assert service.get(key).blob == blob

    def test_concurrent_single_invocation(self, service):
        key = make_key([3])
        calls = []
        lock = threading.Lock()

        def generate():
            with lock:
                calls.append(1)
            time.sleep(0.02)
            return make_blob([3])

        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(lambda _: service.get_or_generate(key, generate), range(8)))
        assert len(calls) == 1
        origins = [origin for _, origin in results]
        assert origins.count(Origin.GENERATED) == 1
        assert origins.count(Origin.WAITED_ON_IN_FLIGHT) == 7
        checksums = {blob.header.checksum for blob, _ in results}
        assert len(checksums) == 1

    def test_failure_propagates_and_clears(self, service):
        key = make_key([4])
        barrier = threading.Barrier(8)

        def explode():
            time.sleep(0.02)
            raise RuntimeError("generation failed")

        def attempt(_):
            barrier.wait()
            try:
                service.get_or_generate(key, explode)
                return None
            except RuntimeError as exc:
                return str(exc)

        with ThreadPoolExecutor(max_workers=8) as pool:
            outcomes = list(pool.map(attempt, range(8)))
        assert all(o == "generation failed" for o in outcomes)
        # a later call may retry and succeed
        blob, origin = service.get_or_generate(key, lambda: make_blob([4]))
        assert origin is Origin.GENERATED

    def test_distinct_keys_generate_independently(self, service):
        counts = {}

        def gen_for(d):
            def gen():
                counts[d] = counts.get(d, 0) + 1
                return make_blob([d])
            return gen

        def work(i):
            d = i % 4 + 10
            return service.get_or_generate(make_key([d]), gen_for(d))

        with ThreadPoolExecutor(max_workers=16) as pool:
            list(pool.map(work, range(64)))
        assert counts == {10: 1, 11: 1, 12: 1, 13: 1}


class TestKeyCodec:
    @given(st.integers(0, 2**64 - 1), st.lists(st.integers(0, 2**64 - 1), min_size=1, max_size=8))
    @settings(max_examples=100, deadline=None)
    def test_bijection(self, model_hash, doc_ids):
        key = KvKey(model_hash, tuple(doc_ids))
        out, consumed = decode_key(encode_key(key))
        assert out == key
        assert consumed == len(encode_key(key))

    def test_truncated_rejected(self):
        data = encode_key(make_key([1, 2]))
        with pytest.raises(ProtocolError):
            decode_key(data[:-1])


@pytest.fixture
def server(tmp_path):
    store = KvStore(tmp_path / "remote", memory_capacity_bytes=1 << 20)
    with CacheServer(store).start() as srv:
        yield srv


class TestRemote:
    def test_put_then_remote_get_identical(self, server):
        key, blob = make_key([1]), make_blob([1], tokens=5)
        server.store.put(key, blob)
        with CacheClient(server.address) as client:
            res = client.get(key)
        assert res.outcome is Outcome.MEMORY_HIT
        assert res.blob == blob

    def test_remote_get_absent_counts_miss(self, server):
        with CacheClient(server.address) as client:
            before = client.stats()["misses"]
            res = client.get(make_key([404]))
            assert res.outcome is Outcome.MISS
            assert res.blob is None
            assert client.stats()["misses"] == before + 1

    def test_remote_put_roundtrip_64kib(self, server):
        # payload of 64 KiB: 2 (k+v) * 1 layer * 1 head * 4 dim * 2 bytes = 16 B/token
        blob = make_blob([7], tokens=4096)
        assert len(blob.payload) == 65536
        key = make_key([7])
        with CacheClient(server.address) as client:
            tier = client.put(key, blob)
            assert tier in (CacheTier.IN_MEMORY, CacheTier.ON_DISK)
            out = client.get(key)
        assert out.blob.header.checksum == blob.header.checksum
        assert out.blob == blob

    def test_contains_matches_local(self, server):
        key = make_key([9])
        with CacheClient(server.address) as client:
            assert client.contains(key) is CacheTier.ABSENT
            server.store.put(key, make_blob([9]))
            assert client.contains(key) is server.store.contains(key)

    def test_client_get_helper(self, server):
        key, blob = make_key([11]), make_blob([11])
        server.store.put(key, blob)
        assert client_get(server.address, key).blob == blob

    def test_serve_accepts_address_string(self, tmp_path):
        store = KvStore(tmp_path / "s2")
        srv = serve("127.0.0.1:0", store)
        try:
            with CacheClient(srv.address) as client:
                assert client.contains(make_key([1])) is CacheTier.ABSENT
        finally:
            srv.stop()

    def test_malformed_frame_keeps_connection(self, server):
        sock = socket.create_connection(server.address, timeout=5)
        try:
            send_frame(sock, 0x7E, b"garbage")  # unknown opcode
            op, payload = recv_frame(sock)
            assert op == OP_ERROR
            assert payload[0] == ERR_MALFORMED
            # connection still serves valid requests
            send_frame(sock, OP_GET, encode_key(make_key([1])))
            op, _ = recv_frame(sock)
            assert op != OP_ERROR
        finally:
            sock.close()

    def test_oversize_frame_closes_connection(self, server):
        sock = socket.create_connection(server.address, timeout=5)
        try:
            sock.sendall(struct.pack(">I", 300 * 1024 * 1024))
            op, payload = recv_frame(sock)
            assert op == OP_ERROR
            assert payload[0] == ERR_OVERSIZE
            with pytest.raises((TransportError, OSError)):
                send_frame(sock, OP_GET, encode_key(make_key([1])))
                recv_frame(sock)
        finally:
            sock.close()

    def test_transport_error_distinct_from_miss(self, server):
        client = CacheClient(server.address)
        client._sock.close()
        with pytest.raises(TransportError):
            client.get(make_key([1]))

    def test_put_immutability_surfaces_remote_error(self, server):
        key = make_key([21])
        with CacheClient(server.address) as client:
            client.put(key, make_blob([21], seed=0))
            with pytest.raises(RemoteCacheError):
                client.put(key, make_blob([21], seed=1))


class TestEquivalence:
    def test_randomized_sequences_match_local(self, tmp_path):
        """Same operation stream against a local store and a served twin."""
        import random

        rng = random.Random(1234)
        local = KvStore(tmp_path / "local", memory_capacity_bytes=4096)
        remote_store = KvStore(tmp_path / "remote", memory_capacity_bytes=4096)
        with CacheServer(remote_store).start() as srv, CacheClient(srv.address) as client:
            doc_pool = list(range(1, 9))
            for step in range(300):
                d = rng.choice(doc_pool)
                key = make_key([d])
                op = rng.random()
                if op < 0.35:
                    blob = make_blob([d], seed=d)
                    try:
                        local.put(key, blob)
                        local_err = None
                    except Exception as exc:
                        local_err = type(exc).__name__
                    try:
                        client.put(key, blob)
                        remote_err = None
                    except RemoteCacheError:
                        remote_err = "remote"
                    assert (local_err is None) == (remote_err is None), f"step {step}"
                elif op < 0.8:
                    a = local.get(key)
                    b = client.get(key)
                    assert a.outcome is b.outcome, f"step {step}"
                    assert (a.blob is None) == (b.blob is None)
                    if a.blob is not None:
                        assert a.blob == b.blob
                        assert a.load_cost_bytes == b.load_cost_bytes
                else:
                    assert local.contains(key) is client.contains(key), f"step {step}"
            ls, rs = local.stats(), client.stats()
            assert (ls.memory_hits, ls.disk_hits, ls.misses) == (
                rs["memory_hits"], rs["disk_hits"], rs["misses"],
            )
