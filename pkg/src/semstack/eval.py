"""Offline ranking/retrieval metrics and the index benchmark harness."""

from __future__ import annotations

import json
import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, EmptyDatasetError, UndefinedMetricError
from .index import EmbeddingIndex, search

REPORT_SCHEMA_VERSION = 1

# column names of the efficiency table being mirrored
COL_INDEXING = "indexing (sec.)"
COL_SEARCH = "search (ms)"
COL_QPS = "QPS"


@dataclass
class ScoredSession:
    session_id: int
    item_ids: Sequence[int]
    scores: Sequence[float]
    ordered: Sequence[bool]


@dataclass(frozen=True)
class SessionAUC:
    value: float
    n_sessions: int
    n_excluded: int

    def __float__(self):
        return self.value


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, tied values sharing the mean of their positions."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x))
    bounds = np.flatnonzero(np.concatenate(([True], xs[1:] != xs[:-1], [True])))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        ranks[order[lo:hi]] = 0.5 * (lo + 1 + hi)
    return ranks


def single_session_auc(scores, positive) -> float | None:
    """Mann-Whitney AUC of one session (ties count 1/2); None when one class is missing."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    rank_sum = _average_ranks(scores)[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def session_auc(sessions: Iterable[ScoredSession]) -> SessionAUC:
    """Unweighted mean of per-session AUC over sessions with both classes."""
    values, excluded = [], 0
    for s in sessions:
        a = single_session_auc(s.scores, s.ordered)
        if a is None:
            excluded += 1
        else:
            values.append(a)
    if not values:
        raise UndefinedMetricError(f"no session has both ordered and non-ordered items ({excluded} excluded)")
    return SessionAUC(math.fsum(values) / len(values), len(values), excluded)


def ndcg_at_k(ranked_ids: Sequence[int], positives, k: int = 5) -> float:
    """Binary-gain NDCG@k with 1/log2(rank+1) discounts; 0.0 with no positives."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    positives = set(positives)
    n_ideal = min(len(positives), k)
    if n_ideal == 0:
        return 0.0
    dcg = math.fsum(1.0 / math.log2(i + 2) for i, x in enumerate(ranked_ids[:k]) if x in positives)
    idcg = math.fsum(1.0 / math.log2(i + 2) for i in range(n_ideal))
    return dcg / idcg


def recall_at_k(retrieved: Sequence[int], relevant, k: int, capped: bool = False) -> float | None:
    """|top-k & relevant| / |relevant|; None when ``relevant`` is empty.

    With ``capped`` the denominator is min(|relevant|, k), so a top-k list
    consisting entirely of relevant items scores 1.0 even when the relevant
    set is larger than k.
    """
    relevant = set(relevant)
    if not relevant:
        return None
    hits = len(set(list(retrieved)[:k]) & relevant)
    return hits / (min(len(relevant), k) if capped else len(relevant))


def ranked_ids(session: ScoredSession) -> list[int]:
    ids = np.asarray(session.item_ids, dtype=np.int64)
    order = np.lexsort((ids, -np.asarray(session.scores, dtype=np.float64)))
    return [int(ids[i]) for i in order]


@dataclass
class RankingReport:
    session_auc: float
    ndcg5: float
    n_sessions: int
    n_excluded: int
    n_ndcg_no_positive: int


def ranking_report(sessions: Sequence[ScoredSession], k: int = 5) -> RankingReport:
    auc = session_auc(sessions)
    ndcgs, empty = [], 0
    for s in sessions:
        pos = {i for i, o in zip(s.item_ids, s.ordered) if o}
        if not pos:
            empty += 1
            continue
        ndcgs.append(ndcg_at_k(ranked_ids(s), pos, k))
    ndcg = math.fsum(ndcgs) / len(ndcgs) if ndcgs else 0.0
    return RankingReport(auc.value, ndcg, auc.n_sessions, auc.n_excluded, empty)


# ---------------------------------------------------------------- benchmark


def machine_descriptor() -> str:
    return (
        f"{platform.machine()} {platform.processor() or 'cpu'} | {os.cpu_count()} logical cpus | "
        f"{platform.system()} {platform.release()} | python {platform.python_version()} | "
        f"numpy {np.__version__}"
    )


@dataclass
class BenchReport:
    index_build_seconds: float
    mean_ms: float
    p50_ms: float
    p99_ms: float
    qps_single: float
    qps_by_concurrency: dict = field(default_factory=dict)
    n_queries: int = 0
    n_items: int = 0
    variant: str = "exact"
    k: int = 10
    nprobe: int | None = None
    machine: str = ""

    def table(self) -> dict:
        return {
            COL_INDEXING: self.index_build_seconds,
            COL_SEARCH: self.mean_ms,
            COL_QPS: self.qps_single,
        }

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "machine": self.machine,
            "table": self.table(),
            "search_p50_ms": self.p50_ms,
            "search_p99_ms": self.p99_ms,
            "qps_by_concurrency": {str(c): q for c, q in self.qps_by_concurrency.items()},
            "n_queries": self.n_queries,
            "n_items": self.n_items,
            "variant": self.variant,
            "k": self.k,
            "nprobe": self.nprobe,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def self_consistent(self, tol: float = 0.2) -> bool:
        return abs(self.qps_single - 1000.0 / self.mean_ms) <= tol * self.qps_single


def bench_search(
    index: EmbeddingIndex,
    queries: np.ndarray,
    k: int = 10,
    nprobe: int | None = None,
    concurrency: Sequence[int] = (1, 2, 4),
    build_seconds: float = 0.0,
    warmup: int = 20,
    single_threaded_blas: bool = True,
) -> BenchReport:
    """Time ``search`` per query; the warmup pass is excluded from every statistic.

    Single-stream latency is measured with BLAS pinned to one thread so the
    number reflects one core.  QPS at concurrency c runs c client threads
    over the same query list.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if len(queries) == 0:
        raise EmptyDatasetError("bench_search needs at least one query")
    limit = 1 if single_threaded_blas else None
    with threadpool_limits(limits=limit):
        for q in queries[: min(warmup, len(queries))]:
            search(index, q, k, nprobe)
        lat = np.empty(len(queries))
        t_all = time.perf_counter()
        for i, q in enumerate(queries):
            t0 = time.perf_counter()
            search(index, q, k, nprobe)
            lat[i] = (time.perf_counter() - t0) * 1e3
        total = time.perf_counter() - t_all
        qps = {}
        for c in concurrency:
            if c <= 1:
                qps[1] = len(queries) / total
                continue
            chunks = np.array_split(np.arange(len(queries)), c)

            def work(rows):
                for r in rows:
                    search(index, queries[r], k, nprobe)

            with ThreadPoolExecutor(c) as pool:
                t0 = time.perf_counter()
                list(pool.map(work, chunks))
                qps[c] = len(queries) / (time.perf_counter() - t0)
    return BenchReport(
        index_build_seconds=build_seconds,
        mean_ms=float(lat.mean()),
        p50_ms=float(np.percentile(lat, 50)),
        p99_ms=float(np.percentile(lat, 99)),
        qps_single=len(queries) / total,
        qps_by_concurrency=qps,
        n_queries=len(queries),
        n_items=len(index),
        variant=index.variant,
        k=k,
        nprobe=nprobe if index.variant == "ivf" else None,
        machine=machine_descriptor(),
    )


def random_unit_vectors(n: int, dim: int, seed: int, dtype=np.float32) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = np.empty((n, dim), dtype=dtype)
    for s in range(0, n, 1 << 16):
        block = rng.standard_normal((min(1 << 16, n - s), dim))
        out[s : s + len(block)] = block / np.linalg.norm(block, axis=1, keepdims=True)
    return out


def clustered_unit_vectors(n: int, dim: int, n_blobs: int, spread: float, seed: int) -> np.ndarray:
    """Unit vectors scattered around ``n_blobs`` random directions (embedding-like data)."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_blobs, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    x = centers[rng.integers(n_blobs, size=n)] + spread * rng.standard_normal((n, dim)) / np.sqrt(dim)
    return x / np.linalg.norm(x, axis=1, keepdims=True)
