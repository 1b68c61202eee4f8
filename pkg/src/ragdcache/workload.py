"""Workload construction and query-document locality analysis.

Three sources of work: replayed traces (JSONL, one item per line), synthetic
Zipf streams, and Poisson arrival timing layered over either.  The locality
curve ranks documents by how often queries retrieve them and reports what
fraction of the corpus is needed to cover a given fraction of queries; that
single number is what makes document caching pay off.
"""

from __future__ import annotations

import json
from bisect import bisect_left
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_Q_TOKENS = 16
DEFAULT_DOC_TOKENS = 120


class TraceError(Exception):
    """A trace file failed to parse; message names the line and field."""


@dataclass(frozen=True)
class WorkItem:
    """One query: either pre-resolved doc ids or an embedding, never both."""

    query_id: int
    q_tokens: int
    doc_ids: tuple[int, ...] | None = None
    doc_tokens: tuple[int, ...] | None = None
    embedding: np.ndarray | None = None

    def __post_init__(self) -> None:
        if (self.doc_ids is None) == (self.embedding is None):
            raise ValueError("exactly one of doc_ids / embedding must be present")
        if self.q_tokens < 1:
            raise ValueError("q_tokens must be >= 1")
        if self.doc_ids is not None:
            if not self.doc_ids:
                raise ValueError("doc_ids must be non-empty when present")
            if self.doc_tokens is None or len(self.doc_tokens) != len(self.doc_ids):
                raise ValueError("doc_tokens must match doc_ids length")


@dataclass(frozen=True)
class LocalityCurve:
    """Running coverage of queries by documents ranked most-retrieved first.

    ``points[i] = (docs_used / corpus_size, fraction_of_queries_covered)``
    after taking the i+1 most frequently retrieved documents.
    """

    points: tuple[tuple[float, float], ...]
    corpus_size: int

    def coverage_at(self, query_fraction: float) -> float:
        """Smallest document fraction whose queries cover >= query_fraction."""
        if not 0.0 < query_fraction <= 1.0:
            raise ValueError("query_fraction must be in (0, 1]")
        coverages = [c for _, c in self.points]
        i = bisect_left(coverages, query_fraction)
        if i == len(self.points):
            return self.points[-1][0]
        return self.points[i][0]


def locality_curve(
    trace: Sequence[tuple[int, int]], corpus_size: int | None = None
) -> LocalityCurve:
    """CDF of query coverage over documents ranked by retrieval frequency.

    ``trace`` is (query_id, top1_doc_id) pairs.  The denominator of the
    document axis is ``corpus_size`` (how many documents exist), defaulting
    to the number of distinct documents seen.  Frequency ties rank the
    smaller doc id first.
    """
    if not trace:
        raise ValueError("trace must be non-empty")
    counts: dict[int, int] = {}
    for _, doc_id in trace:
        counts[doc_id] = counts.get(doc_id, 0) + 1
    if corpus_size is None:
        corpus_size = len(counts)
    if corpus_size < len(counts):
        raise ValueError("corpus_size smaller than distinct documents in trace")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    total = len(trace)
    points = []
    covered = 0
    for i, (_, count) in enumerate(ranked, start=1):
        covered += count
        points.append((i / corpus_size, covered / total))
    return LocalityCurve(points=tuple(points), corpus_size=corpus_size)


def zipf_probabilities(n_docs: int, s: float) -> np.ndarray:
    """p(rank) proportional to rank**-s over ranks 1..n_docs."""
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    if s < 0:
        raise ValueError("s must be >= 0")
    ranks = np.arange(1, n_docs + 1, dtype=np.float64)
    weights = ranks ** (-s)
    return weights / weights.sum()


def zipf_stream(
    n_docs: int,
    s: float,
    n_queries: int,
    seed: int,
    k: int = 1,
    q_tokens: int = DEFAULT_Q_TOKENS,
    doc_tokens: int = DEFAULT_DOC_TOKENS,
) -> list[WorkItem]:
    """Synthetic stream: each query retrieves k distinct docs drawn Zipf(s).

    Doc ids are 1..n_docs with popularity equal to rank.  Deterministic for
    a given seed.
    """
    if k < 1 or k > n_docs:
        raise ValueError("k must be in 1..n_docs")
    cum = np.cumsum(zipf_probabilities(n_docs, s))
    cum[-1] = 1.0  # guard against float shortfall
    rng = np.random.default_rng(seed)

    def draw(n: int) -> np.ndarray:
        return np.searchsorted(cum, rng.random(n), side="right") + 1

    columns = [draw(n_queries) for _ in range(k)]
    docs_matrix = np.stack(columns, axis=1)
    if k > 1:
        for row in range(n_queries):
            seen = set()
            for col in range(k):
                while int(docs_matrix[row, col]) in seen:
                    docs_matrix[row, col] = draw(1)[0]
                seen.add(int(docs_matrix[row, col]))

    per_doc = (doc_tokens,) * k
    return [
        WorkItem(
            query_id=qid,
            q_tokens=q_tokens,
            doc_ids=tuple(int(d) for d in docs_matrix[qid]),
            doc_tokens=per_doc,
        )
        for qid in range(n_queries)
    ]


def fit_zipf_exponent(
    target_coverage: float,
    n_docs: int = 1000,
    n_queries: int = 100_000,
    seed: int = 7,
    query_fraction: float = 0.5,
    tol: float = 1e-3,
    max_iter: int = 40,
) -> float:
    """Exponent s such that covering ``query_fraction`` of a Zipf(s) stream
    needs about ``target_coverage`` of the corpus.  Coverage is decreasing in
    s, so bisection converges."""

    def coverage(s: float) -> float:
        items = zipf_stream(n_docs, s, n_queries, seed=seed)
        trace = [(it.query_id, it.doc_ids[0]) for it in items]
        return locality_curve(trace, corpus_size=n_docs).coverage_at(query_fraction)

    lo, hi = 0.0, 3.0
    if coverage(hi) > target_coverage:
        return hi
    for _ in range(max_iter):
        mid = (lo + hi) / 2
        c = coverage(mid)
        if abs(c - target_coverage) <= tol:
            return mid
        if c > target_coverage:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def load_trace(path: str | Path) -> list[WorkItem]:
    """Read work items from JSONL:
    {"query_id": int, "doc_ids": [...], "q_tokens": int?, "doc_tokens": [...]?}.
    Missing token counts fall back to the module defaults."""
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                doc_ids = tuple(int(d) for d in obj["doc_ids"])
            except (KeyError, TypeError, ValueError) as exc:
                raise TraceError(f"{path}:{lineno}: field 'doc_ids': {exc}") from exc
            q_tokens = int(obj.get("q_tokens", DEFAULT_Q_TOKENS))
            raw_doc_tokens = obj.get("doc_tokens")
            if raw_doc_tokens is None:
                doc_tokens = (DEFAULT_DOC_TOKENS,) * len(doc_ids)
            else:
                doc_tokens = tuple(int(t) for t in raw_doc_tokens)
            if len(doc_tokens) != len(doc_ids):
                raise TraceError(
                    f"{path}:{lineno}: field 'doc_tokens': length {len(doc_tokens)} "
                    f"does not match {len(doc_ids)} doc_ids"
                )
            try:
                items.append(
                    WorkItem(
                        query_id=int(obj.get("query_id", lineno - 1)),
                        q_tokens=q_tokens,
                        doc_ids=doc_ids,
                        doc_tokens=doc_tokens,
                    )
                )
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from exc
    if not items:
        raise TraceError(f"{path}: no work items")
    return items


def save_trace(items: Iterable[WorkItem], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            if item.doc_ids is None:
                raise ValueError("only doc-id items can be saved to a trace")
            fh.write(
                json.dumps(
                    {
                        "query_id": item.query_id,
                        "doc_ids": list(item.doc_ids),
                        "q_tokens": item.q_tokens,
                        "doc_tokens": list(item.doc_tokens),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def poissonize(
    items: Sequence[WorkItem], rate: float, seed: int
) -> list[tuple[float, WorkItem]]:
    """Assign arrival times with exponential gaps of mean 1/rate."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    rng = np.random.default_rng(seed)
    gaps = rng.exponential(scale=1.0 / rate, size=len(items))
    arrivals = np.cumsum(gaps)
    return [(float(t), item) for t, item in zip(arrivals, items)]


def uniform_arrivals(items: Sequence[WorkItem], rate: float) -> list[tuple[float, WorkItem]]:
    """Fixed-interval arrivals; fully reproducible without a seed."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    gap = 1.0 / rate
    return [(gap * (i + 1), item) for i, item in enumerate(items)]
