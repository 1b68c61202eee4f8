"""Binary format for KV-cache blobs.

A blob holds the key/value tensors produced by prefilling one ordered
combination of document chunks.  Payloads here are deterministic synthetic
byte streams with the exact size a real fp16/fp32 KV cache would have, so
storage and transfer behave realistically without any ML runtime.

On-disk layout (all integers little-endian):

    magic(4) | version(2) | model_hash(8) | doc_count(2) | doc_ids(8*doc_count)
    | token_count(4) | layers(2) | kv_heads(2) | head_dim(2) | elem_width(1)
    | reserved(3, zero) | payload_len(8) | checksum(8) | payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAGIC = b"RDKV"
VERSION = 1

_U64_MASK = 0xFFFFFFFFFFFFFFFF
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

# splitmix64 constants
_SM_GOLDEN = 0x9E3779B97F4A7C15
_SM_MIX1 = 0xBF58476D1CE4E5B9
_SM_MIX2 = 0x94D049BB133111EB

_HEADER_FIXED = struct.Struct("<4sHQH")          # magic, version, model_hash, doc_count
_HEADER_TAIL = struct.Struct("<IHHHB3xQQ")       # token_count, layers, kv_heads, head_dim,
                                                 # elem_width, reserved, payload_len, checksum


class CodecError(Exception):
    """Base class for blob encode/decode failures."""


class BadMagicError(CodecError):
    pass


class UnsupportedVersionError(CodecError):
    pass


class TruncatedError(CodecError):
    pass


class ChecksumMismatchError(CodecError):
    pass


class MalformedHeaderError(CodecError):
    pass


def fnv1a64(data: bytes, seed: int = _FNV_OFFSET) -> int:
    """64-bit FNV-1a hash."""
    h = seed
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64_MASK
    return h


@dataclass(frozen=True)
class ModelProfile:
    """Dimensions that determine KV-cache size for one model."""

    model_id: str
    layers: int
    hidden_dim: int
    kv_heads: int
    head_dim: int
    elem_width: int = 2

    def __post_init__(self) -> None:
        for name in ("layers", "hidden_dim", "kv_heads", "head_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.elem_width not in (2, 4):
            raise ValueError("elem_width must be 2 or 4 bytes")
        if self.kv_heads * self.head_dim != self.hidden_dim:
            raise ValueError(
                f"kv_heads * head_dim must equal hidden_dim "
                f"({self.kv_heads} * {self.head_dim} != {self.hidden_dim})"
            )

    @property
    def model_hash(self) -> int:
        canonical = "\x00".join(
            (
                self.model_id,
                str(self.layers),
                str(self.hidden_dim),
                str(self.kv_heads),
                str(self.head_dim),
                str(self.elem_width),
            )
        )
        return fnv1a64(canonical.encode("utf-8"))


@dataclass(frozen=True)
class KvBlobHeader:
    model_hash: int
    doc_ids: tuple[int, ...]
    token_count: int
    layers: int
    kv_heads: int
    head_dim: int
    elem_width: int
    payload_len: int
    checksum: int
    magic: bytes = MAGIC
    version: int = VERSION

    def __post_init__(self) -> None:
        if not self.doc_ids:
            raise ValueError("doc_ids must be non-empty")
        if self.token_count < 1:
            raise ValueError("token_count must be >= 1")
        expected = 2 * self.layers * self.kv_heads * self.head_dim * self.token_count * self.elem_width
        if self.payload_len != expected:
            raise ValueError(
                f"payload_len {self.payload_len} does not match dimensions (expected {expected})"
            )

    @property
    def encoded_size(self) -> int:
        return header_size(len(self.doc_ids)) + self.payload_len


@dataclass(frozen=True)
class KvBlob:
    header: KvBlobHeader
    payload: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.payload) != self.header.payload_len:
            raise ValueError("payload length does not match header")
        if fnv1a64(self.payload) != self.header.checksum:
            raise ValueError("payload checksum does not match header")


def blob_size(profile: ModelProfile, token_count: int) -> int:
    """Payload bytes for a cache of ``token_count`` tokens (keys and values)."""
    if token_count < 0:
        raise ValueError("token_count must be >= 0")
    return 2 * profile.layers * profile.kv_heads * profile.head_dim * token_count * profile.elem_width


def header_size(doc_count: int) -> int:
    return _HEADER_FIXED.size + 8 * doc_count + _HEADER_TAIL.size


def encoded_size(profile: ModelProfile, token_count: int, doc_count: int) -> int:
    """Total bytes of an encoded blob, header included."""
    return header_size(doc_count) + blob_size(profile, token_count)


def _splitmix64(x: int) -> int:
    x = (x + _SM_GOLDEN) & _U64_MASK
    x = ((x ^ (x >> 30)) * _SM_MIX1) & _U64_MASK
    x = ((x ^ (x >> 27)) * _SM_MIX2) & _U64_MASK
    return x ^ (x >> 31)


def _keystream(state: int, n_bytes: int) -> bytes:
    """Counter-mode splitmix64 stream; stable across platforms and numpy versions."""
    if n_bytes == 0:
        return b""
    n_words = (n_bytes + 7) // 8
    idx = np.arange(1, n_words + 1, dtype=np.uint64)
    x = np.uint64(state & _U64_MASK) + idx * np.uint64(_SM_GOLDEN)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(_SM_MIX1)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(_SM_MIX2)
    x = x ^ (x >> np.uint64(31))
    return x.astype("<u8").tobytes()[:n_bytes]


def synth_blob(
    profile: ModelProfile,
    doc_ids: Sequence[int],
    token_count: int,
    seed: int = 0,
) -> KvBlob:
    """Deterministic synthetic blob for an ordered document combination.

    The payload depends on (seed, model, doc order, token count); the same
    inputs always produce byte-identical blobs, so concurrent generators for
    one key are interchangeable.
    """
    ids = tuple(int(d) for d in doc_ids)
    if not ids:
        raise ValueError("doc_ids must be non-empty")
    if token_count < 1:
        raise ValueError("token_count must be >= 1")

    state = seed & _U64_MASK
    state = _splitmix64(state ^ profile.model_hash)
    for d in ids:
        state = _splitmix64(state ^ (d & _U64_MASK))
    state = _splitmix64(state ^ token_count)

    payload = _keystream(state, blob_size(profile, token_count))
    header = KvBlobHeader(
        model_hash=profile.model_hash,
        doc_ids=ids,
        token_count=token_count,
        layers=profile.layers,
        kv_heads=profile.kv_heads,
        head_dim=profile.head_dim,
        elem_width=profile.elem_width,
        payload_len=len(payload),
        checksum=fnv1a64(payload),
    )
    return KvBlob(header=header, payload=payload)


def encode(blob: KvBlob) -> bytes:
    """Canonical byte encoding; exactly one byte sequence per blob."""
    h = blob.header
    parts = [
        _HEADER_FIXED.pack(h.magic, h.version, h.model_hash, len(h.doc_ids)),
        struct.pack(f"<{len(h.doc_ids)}Q", *h.doc_ids),
        _HEADER_TAIL.pack(
            h.token_count, h.layers, h.kv_heads, h.head_dim, h.elem_width,
            h.payload_len, h.checksum,
        ),
        blob.payload,
    ]
    return b"".join(parts)


def decode_header(data: bytes) -> tuple[KvBlobHeader, int]:
    """Parse a header from the front of ``data``; returns (header, header_bytes)."""
    if len(data) < _HEADER_FIXED.size:
        raise TruncatedError(f"buffer too short for header: {len(data)} bytes")
    magic, version, model_hash, doc_count = _HEADER_FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if doc_count == 0:
        raise MalformedHeaderError("doc_count must be >= 1")
    hdr_len = header_size(doc_count)
    if len(data) < hdr_len:
        raise TruncatedError(f"buffer too short for {doc_count} doc ids")
    offset = _HEADER_FIXED.size
    doc_ids = struct.unpack_from(f"<{doc_count}Q", data, offset)
    offset += 8 * doc_count
    token_count, layers, kv_heads, head_dim, elem_width, payload_len, checksum = (
        _HEADER_TAIL.unpack_from(data, offset)
    )
    reserved = data[offset + 11 : offset + 14]
    if reserved != b"\x00\x00\x00":
        raise MalformedHeaderError("reserved bytes must be zero")
    try:
        header = KvBlobHeader(
            model_hash=model_hash,
            doc_ids=doc_ids,
            token_count=token_count,
            layers=layers,
            kv_heads=kv_heads,
            head_dim=head_dim,
            elem_width=elem_width,
            payload_len=payload_len,
            checksum=checksum,
        )
    except ValueError as exc:
        raise MalformedHeaderError(str(exc)) from exc
    return header, hdr_len


def decode(data: bytes) -> KvBlob:
    """Inverse of :func:`encode`; rejects corrupt or truncated input."""
    header, hdr_len = decode_header(data)
    end = hdr_len + header.payload_len
    if len(data) < end:
        raise TruncatedError(
            f"payload truncated: have {len(data) - hdr_len} of {header.payload_len} bytes"
        )
    if len(data) > end:
        raise MalformedHeaderError(f"{len(data) - end} trailing bytes after payload")
    payload = data[hdr_len:end]
    if fnv1a64(payload) != header.checksum:
        raise ChecksumMismatchError("payload checksum mismatch")
    return KvBlob(header=header, payload=payload)
