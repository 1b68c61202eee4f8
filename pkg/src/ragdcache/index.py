"""Flat inner-product retrieval over document-chunk embeddings.

Exact brute-force scan, no approximate structures.  Each entry pairs an
embedding with its document id and token count; the KV cache for a chunk (or
a retrieved combination of chunks) lives in the blob store, resolved by key,
not inline.  Ties on score break by ascending doc id so results are
deterministic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

INDEX_FORMAT = "ragdcache-index"
INDEX_VERSION = 1

_ID_TOKENS = struct.Struct("<QI")


class IndexError_(Exception):
    """Base class for index failures (named to avoid shadowing the builtin)."""


class DimensionMismatchError(IndexError_):
    pass


class DuplicateDocIdError(IndexError_):
    pass


class ChunkFileError(IndexError_):
    """A chunk file line failed to parse; message carries the line number."""


@dataclass(frozen=True)
class DocChunk:
    doc_id: int
    token_count: int
    embedding: np.ndarray
    text: str = ""

    def __post_init__(self) -> None:
        if self.doc_id < 0:
            raise ValueError("doc_id must be non-negative")
        if self.token_count < 1:
            raise ValueError("token_count must be >= 1")
        emb = np.asarray(self.embedding, dtype=np.float32)
        if emb.ndim != 1:
            raise ValueError("embedding must be one-dimensional")
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class SearchHit:
    doc_id: int
    score: float


@dataclass
class VectorIndex:
    """Brute-force flat index. Concurrent readers are fine; writes need
    exclusive access (single-writer contract, not enforced internally)."""

    dim: int
    _chunks: dict[int, DocChunk] = field(default_factory=dict)
    _matrix: np.ndarray | None = field(default=None, repr=False)
    _ids: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self._chunks)

    def add(self, chunk: DocChunk) -> None:
        if chunk.embedding.shape[0] != self.dim:
            raise DimensionMismatchError(
                f"embedding dim {chunk.embedding.shape[0]} != index dim {self.dim}"
            )
        if chunk.doc_id in self._chunks:
            raise DuplicateDocIdError(f"doc_id {chunk.doc_id} already present")
        self._chunks[chunk.doc_id] = chunk
        self._matrix = None  # rebuilt lazily

    def get(self, doc_id: int) -> DocChunk:
        return self._chunks[doc_id]

    def token_count(self, doc_id: int) -> int:
        return self._chunks[doc_id].token_count

    def doc_ids(self) -> list[int]:
        return sorted(self._chunks)

    def _ensure_matrix(self) -> None:
        if self._matrix is None:
            ids = sorted(self._chunks)
            self._ids = np.asarray(ids, dtype=np.uint64)
            if ids:
                self._matrix = np.stack([self._chunks[i].embedding for i in ids])
            else:
                self._matrix = np.empty((0, self.dim), dtype=np.float32)

    def search(self, query: np.ndarray, k: int) -> list[SearchHit]:
        """Top-k by inner product, highest first, ties by ascending doc id."""
        q = np.asarray(query, dtype=np.float32)
        if q.ndim != 1 or q.shape[0] != self.dim:
            raise DimensionMismatchError(f"query dim {q.shape} != index dim {self.dim}")
        if k < 1:
            raise ValueError("k must be >= 1")
        self._ensure_matrix()
        if len(self._chunks) == 0:
            return []
        scores = self._matrix @ q
        order = np.lexsort((self._ids, -scores))[:k]
        return [SearchHit(int(self._ids[i]), float(scores[i])) for i in order]

    def save(self, path: str | Path) -> None:
        """Single-file layout: JSON manifest line, then the float32 embedding
        block, then an (id, token_count) table.  Chunk text is not persisted."""
        self._ensure_matrix()
        manifest = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "dim": self.dim,
            "count": len(self._chunks),
        }
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            fh.write(np.ascontiguousarray(self._matrix, dtype="<f4").tobytes())
            for doc_id in self._ids:
                fh.write(_ID_TOKENS.pack(int(doc_id), self._chunks[int(doc_id)].token_count))
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        with open(path, "rb") as fh:
            line = fh.readline()
            try:
                manifest = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IndexError_(f"{path}: bad manifest line") from exc
            if manifest.get("format") != INDEX_FORMAT:
                raise IndexError_(f"{path}: not an index file")
            if manifest.get("version") != INDEX_VERSION:
                raise IndexError_(f"{path}: unsupported version {manifest.get('version')}")
            dim = int(manifest["dim"])
            count = int(manifest["count"])
            block = fh.read(4 * dim * count)
            if len(block) != 4 * dim * count:
                raise IndexError_(f"{path}: embedding block truncated")
            matrix = np.frombuffer(block, dtype="<f4").reshape(count, dim)
            index = cls(dim=dim)
            for row in range(count):
                raw = fh.read(_ID_TOKENS.size)
                if len(raw) != _ID_TOKENS.size:
                    raise IndexError_(f"{path}: id table truncated at row {row}")
                doc_id, tokens = _ID_TOKENS.unpack(raw)
                index.add(DocChunk(doc_id=doc_id, token_count=tokens, embedding=matrix[row]))
        return index


def read_chunks_jsonl(path: str | Path) -> Iterator[DocChunk]:
    """Parse a chunk file, one JSON object per line:
    {"doc_id": int, "token_count": int, "embedding": [float, ...], "text": optional str}.
    """
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ChunkFileError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                yield DocChunk(
                    doc_id=int(obj["doc_id"]),
                    token_count=int(obj["token_count"]),
                    embedding=np.asarray(obj["embedding"], dtype=np.float32),
                    text=obj.get("text", ""),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ChunkFileError(f"{path}:{lineno}: {exc}") from exc


def build_index(chunks: Iterable[DocChunk], dim: int | None = None) -> VectorIndex:
    chunks = iter(chunks)
    if dim is None:
        first = next(chunks, None)
        if first is None:
            raise IndexError_("no chunks provided")
        dim = first.embedding.shape[0]
        index = VectorIndex(dim=dim)
        index.add(first)
    else:
        index = VectorIndex(dim=dim)
    for chunk in chunks:
        index.add(chunk)
    return index
