"""Shared cache coordination: single-flight generation and a remote protocol.

``SharedCacheService`` wraps a :class:`~ragdcache.store.KvStore` so that
concurrent requests for one absent key trigger exactly one generation; late
requesters block on the first caller's result.  The store write completes
before any waiter is released, so every caller sees a durable entry.

The wire protocol serves the same store to other processes.  Framing is a
4-byte big-endian length prefix covering one opcode byte plus the body.
Frames above 256 MiB are refused and the connection closed; any other
malformed frame gets an error response and the connection stays usable.

Error codes: 1 absent, 2 corrupt, 3 malformed, 4 oversize, 5 internal.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
from concurrent.futures import Future
from dataclasses import dataclass
from enum import Enum
from typing import Callable

from . import codec
from .codec import CodecError, KvBlob
from .store import CacheTier, CorruptBlobError, KvKey, KvStore, LookupResult, Outcome

MAX_FRAME = 256 * 1024 * 1024

# request opcodes
OP_GET = 0x01
OP_PUT = 0x02
OP_CONTAINS = 0x03
OP_STATS = 0x04
# response opcodes
OP_BLOB = 0x81
OP_STATE = 0x82
OP_STATS_BODY = 0x83
OP_ERROR = 0xFF

ERR_ABSENT = 1
ERR_CORRUPT = 2
ERR_MALFORMED = 3
ERR_OVERSIZE = 4
ERR_INTERNAL = 5

_STATE_CODE = {CacheTier.ABSENT: 0, CacheTier.IN_MEMORY: 1, CacheTier.ON_DISK: 2}
_CODE_STATE = {v: k for k, v in _STATE_CODE.items()}
_OUTCOME_CODE = {Outcome.MEMORY_HIT: 1, Outcome.DISK_HIT: 2}
_CODE_OUTCOME = {v: k for k, v in _OUTCOME_CODE.items()}


class Origin(Enum):
    MEMORY_HIT = "memory_hit"
    DISK_HIT = "disk_hit"
    GENERATED = "generated"
    WAITED_ON_IN_FLIGHT = "waited_on_in_flight"


class TransportError(ConnectionError):
    """Connection failed mid-exchange; distinct from a cache miss."""


class RemoteCacheError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(f"remote error {code}: {message}")
        self.code = code


class ProtocolError(Exception):
    pass


class SharedCacheService:
    """Thread-safe facade adding request deduplication over a KvStore."""

    _OUTCOME_TO_ORIGIN = {Outcome.MEMORY_HIT: Origin.MEMORY_HIT, Outcome.DISK_HIT: Origin.DISK_HIT}

    def __init__(self, store: KvStore) -> None:
        self.store = store
        self._lock = threading.Lock()
        self._inflight: dict[KvKey, Future] = {}

    def get_or_generate(
        self, key: KvKey, generate: Callable[[], KvBlob]
    ) -> tuple[KvBlob, Origin]:
        """Return the blob for ``key``, producing it at most once system-wide.

        ``generate`` must be deterministic for the key.  A generation failure
        propagates to every waiter and clears the in-flight mark, so a later
        call may retry.
        """
        while True:
            result = self.store.get(key)
            if result.outcome is not Outcome.MISS:
                return result.blob, self._OUTCOME_TO_ORIGIN[result.outcome]

            with self._lock:
                pending = self._inflight.get(key)
                if pending is None:
                    if self.store.contains(key) is not CacheTier.ABSENT:
                        continue  # raced a finished generation; re-read
                    pending = Future()
                    self._inflight[key] = pending
                    owner = True
                else:
                    owner = False

            if not owner:
                # wait outside the lock; result() re-raises generation errors
                return pending.result(), Origin.WAITED_ON_IN_FLIGHT

            try:
                blob = generate()
                self.store.put(key, blob)
            except BaseException as exc:
                with self._lock:
                    self._inflight.pop(key, None)
                pending.set_exception(exc)
                raise
            with self._lock:
                self._inflight.pop(key, None)
            pending.set_result(blob)
            return blob, Origin.GENERATED

    # passthroughs so the service can stand in for the store
    def get(self, key: KvKey) -> LookupResult:
        return self.store.get(key)

    def put(self, key: KvKey, blob: KvBlob) -> None:
        self.store.put(key, blob)

    def contains(self, key: KvKey) -> CacheTier:
        return self.store.contains(key)

    def stats(self):
        return self.store.stats()


# -- framing ----------------------------------------------------------------


def encode_key(key: KvKey) -> bytes:
    return struct.pack("<QH", key.model_hash, len(key.doc_ids)) + struct.pack(
        f"<{len(key.doc_ids)}Q", *key.doc_ids
    )


def decode_key(body: bytes, offset: int = 0) -> tuple[KvKey, int]:
    if len(body) - offset < 10:
        raise ProtocolError("key too short")
    model_hash, count = struct.unpack_from("<QH", body, offset)
    offset += 10
    if count == 0:
        raise ProtocolError("key has no doc ids")
    if len(body) - offset < 8 * count:
        raise ProtocolError("key doc ids truncated")
    doc_ids = struct.unpack_from(f"<{count}Q", body, offset)
    return KvKey(model_hash, doc_ids), offset + 8 * count


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    parts = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise TransportError(f"connection closed with {remaining} bytes outstanding")
        parts.append(chunk)
        remaining -= len(chunk)
    return b"".join(parts)


def send_frame(sock: socket.socket, opcode: int, body: bytes = b"") -> None:
    if 1 + len(body) > MAX_FRAME:
        raise ProtocolError("frame exceeds maximum size")
    sock.sendall(struct.pack(">I", 1 + len(body)) + bytes([opcode]) + body)


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    if length < 1:
        raise ProtocolError("empty frame")
    if length > MAX_FRAME:
        raise ProtocolError("oversize frame")
    payload = _recv_exact(sock, length)
    return payload[0], payload[1:]


# -- server ------------------------------------------------------------------


class CacheServer:
    """Single listener, one thread per connection, one request in flight per
    connection.  Remote operations hit the underlying store directly, so
    counters and eviction behave exactly as for local calls."""

    def __init__(self, store: KvStore | SharedCacheService, host: str = "127.0.0.1", port: int = 0) -> None:
        self.store = store
        self._listener = socket.create_server((host, port))
        self.address: tuple[str, int] = self._listener.getsockname()[:2]
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._conns: set[socket.socket] = set()
        self._conn_lock = threading.Lock()
        self._accept_thread: threading.Thread | None = None

    def start(self) -> "CacheServer":
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            with self._conn_lock:
                self._conns.add(conn)
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn: socket.socket) -> None:
        try:
            while not self._stop.is_set():
                try:
                    opcode, body = recv_frame(conn)
                except TransportError:
                    return
                except ProtocolError as exc:
                    if "oversize" in str(exc):
                        self._safe_send(conn, OP_ERROR, bytes([ERR_OVERSIZE]) + str(exc).encode())
                        return
                    self._safe_send(conn, OP_ERROR, bytes([ERR_MALFORMED]) + str(exc).encode())
                    continue
                try:
                    op, out = self._handle(opcode, body)
                except ProtocolError as exc:
                    op, out = OP_ERROR, bytes([ERR_MALFORMED]) + str(exc).encode()
                except CorruptBlobError as exc:
                    op, out = OP_ERROR, bytes([ERR_CORRUPT]) + str(exc).encode()
                except Exception as exc:  # noqa: BLE001 - report, keep serving
                    op, out = OP_ERROR, bytes([ERR_INTERNAL]) + str(exc).encode()
                if not self._safe_send(conn, op, out):
                    return
        finally:
            with self._conn_lock:
                self._conns.discard(conn)
            try:
                conn.close()
            except OSError:
                pass

    def _safe_send(self, conn: socket.socket, opcode: int, body: bytes) -> bool:
        try:
            send_frame(conn, opcode, body)
            return True
        except OSError:
            return False

    def _handle(self, opcode: int, body: bytes) -> tuple[int, bytes]:
        if opcode == OP_GET:
            key, end = decode_key(body)
            if end != len(body):
                raise ProtocolError("trailing bytes in get request")
            result = self.store.get(key)
            if result.outcome is Outcome.MISS:
                return OP_STATE, bytes([_STATE_CODE[CacheTier.ABSENT]])
            payload = struct.pack("<BQ", _OUTCOME_CODE[result.outcome], result.load_cost_bytes)
            return OP_BLOB, payload + codec.encode(result.blob)
        if opcode == OP_PUT:
            key, end = decode_key(body)
            try:
                blob = codec.decode(body[end:])
            except CodecError as exc:
                raise ProtocolError(f"bad blob in put: {exc}") from exc
            self.store.put(key, blob)
            return OP_STATE, bytes([_STATE_CODE[self.store.contains(key)]])
        if opcode == OP_CONTAINS:
            key, end = decode_key(body)
            if end != len(body):
                raise ProtocolError("trailing bytes in contains request")
            return OP_STATE, bytes([_STATE_CODE[self.store.contains(key)]])
        if opcode == OP_STATS:
            if body:
                raise ProtocolError("stats request takes no body")
            return OP_STATS_BODY, self.store.stats().to_json().encode("utf-8")
        raise ProtocolError(f"unknown opcode {opcode:#x}")

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.shutdown(socket.SHUT_RDWR)  # wakes a blocked accept()
        except OSError:
            pass
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conn_lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                conn.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2)
        for t in self._threads:
            t.join(timeout=2)

    def __enter__(self) -> "CacheServer":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(listen_address: tuple[str, int] | str, store: KvStore | SharedCacheService) -> CacheServer:
    """Start a cache server on ``host:port`` (tuple or ``"host:port"`` string)."""
    if isinstance(listen_address, str):
        host, _, port = listen_address.rpartition(":")
        listen_address = (host or "127.0.0.1", int(port))
    server = CacheServer(store, host=listen_address[0], port=listen_address[1])
    return server.start()


# -- client ------------------------------------------------------------------


@dataclass(frozen=True)
class RemoteLookup:
    outcome: Outcome
    blob: KvBlob | None = None
    load_cost_bytes: int = 0


class CacheClient:
    """Blocking client; one request in flight at a time."""

    def __init__(self, address: tuple[str, int], timeout: float | None = 30.0) -> None:
        self._sock = socket.create_connection(address, timeout=timeout)
        self._lock = threading.Lock()

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "CacheClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _roundtrip(self, opcode: int, body: bytes) -> tuple[int, bytes]:
        with self._lock:
            try:
                send_frame(self._sock, opcode, body)
                op, payload = recv_frame(self._sock)
            except (OSError, TransportError) as exc:
                raise TransportError(str(exc)) from exc
        if op == OP_ERROR:
            if not payload:
                raise ProtocolError("empty error response")
            raise RemoteCacheError(payload[0], payload[1:].decode("utf-8", "replace"))
        return op, payload

    def get(self, key: KvKey) -> RemoteLookup:
        op, payload = self._roundtrip(OP_GET, encode_key(key))
        if op == OP_STATE:
            if payload and payload[0] == 0:
                return RemoteLookup(Outcome.MISS)
            raise ProtocolError(f"unexpected state {payload!r} for get")
        if op != OP_BLOB:
            raise ProtocolError(f"unexpected response opcode {op:#x}")
        outcome_code, load_cost = struct.unpack_from("<BQ", payload, 0)
        blob = codec.decode(payload[9:])
        return RemoteLookup(_CODE_OUTCOME[outcome_code], blob, load_cost)

    def put(self, key: KvKey, blob: KvBlob) -> CacheTier:
        op, payload = self._roundtrip(OP_PUT, encode_key(key) + codec.encode(blob))
        if op != OP_STATE or not payload:
            raise ProtocolError(f"unexpected response opcode {op:#x}")
        return _CODE_STATE[payload[0]]

    def contains(self, key: KvKey) -> CacheTier:
        op, payload = self._roundtrip(OP_CONTAINS, encode_key(key))
        if op != OP_STATE or not payload:
            raise ProtocolError(f"unexpected response opcode {op:#x}")
        return _CODE_STATE[payload[0]]

    def stats(self) -> dict:
        op, payload = self._roundtrip(OP_STATS, b"")
        if op != OP_STATS_BODY:
            raise ProtocolError(f"unexpected response opcode {op:#x}")
        return json.loads(payload.decode("utf-8"))


def client_get(address: tuple[str, int], key: KvKey) -> RemoteLookup:
    """One-shot remote get."""
    with CacheClient(address) as client:
        return client.get(key)
