"""Embedding index over unit-norm item vectors: exhaustive or inverted-file (IVF).

Vectors are stored in float32.  A search scans candidates in float32, keeps
everything within the float32 rounding bound of the K-th best score, and
rescores those in float64, so the returned top-K and its scores are what a
float64 scan of the stored vectors would produce.

File layout (little-endian)::

    "EIDX" | u32 version | u8 variant | u32 dim | u64 count
    u64[count] item ids | f32[count*dim] vectors (row-major)
    ivf only: u32 n_clusters | f32[n_clusters*dim] centroids
              n_clusters x (u32 length | u32[length] offsets)
    u64 CRC-64/XZ of every preceding byte
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .crc64 import crc64
from .errors import (
    ChecksumError,
    ConfigError,
    FormatError,
    MagicError,
    ShapeError,
    UnsupportedVersionError,
)

MAGIC = b"EIDX"
VERSION = 1
EXACT, IVF = 0, 1
VARIANTS = {EXACT: "exact", IVF: "ivf"}
NORM_TOL = 1e-3
KMEANS_ITERS = 20

_HEADER = struct.Struct("<4sIBIQ")
_CHUNK = 8192


@dataclass(eq=False)
class EmbeddingIndex:
    variant: str
    dim: int
    item_ids: np.ndarray  # uint64
    vectors: np.ndarray  # float32, (N, dim)
    centroids: np.ndarray | None = None  # float32, (n_clusters, dim)
    postings: list[np.ndarray] | None = None  # uint32 row offsets per cluster

    def __len__(self):
        return len(self.item_ids)

    @property
    def n_clusters(self) -> int:
        return 0 if self.centroids is None else len(self.centroids)

    def default_nprobe(self) -> int:
        if self.variant != "ivf":
            return 1
        return min(self.n_clusters, max(8, self.n_clusters // 16))


@dataclass(frozen=True)
class SearchResult:
    ids: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.ids)

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(s)) for i, s in zip(self.ids, self.scores)]


def _prepare(ids, vectors, dim: int | None):
    ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.size == 0:
        vectors = vectors.reshape(0, dim or (vectors.shape[-1] if vectors.ndim == 2 else 0))
    if vectors.ndim != 2 or len(vectors) != len(ids):
        raise ShapeError(f"need one vector row per id: {len(ids)} ids, vectors {vectors.shape}")
    if dim is not None and vectors.shape[1] != dim:
        raise ShapeError(f"vector dim {vectors.shape[1]} != {dim}")
    if len(np.unique(ids)) != len(ids):
        raise ConfigError("duplicate item ids")
    norms = np.linalg.norm(vectors, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
    if len(bad):
        raise ShapeError(f"vector for item {ids[bad[0]]} has norm {norms[bad[0]]:.6f}, expected 1")
    return ids, np.ascontiguousarray(vectors, dtype=np.float32)


def build_exact(ids, vectors, dim: int | None = None) -> EmbeddingIndex:
    ids, vecs = _prepare(ids, vectors, dim)
    return EmbeddingIndex("exact", vecs.shape[1], ids, vecs)


def _argmax_rows(x: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best centroid per row by dot product (lowest index on ties), chunked."""
    best = np.empty(len(x), dtype=np.int64)
    score = np.empty(len(x))
    for s in range(0, len(x), _CHUNK):
        sims = x[s : s + _CHUNK] @ c.T
        best[s : s + _CHUNK] = np.argmax(sims, axis=1)
        score[s : s + _CHUNK] = sims[np.arange(len(sims)), best[s : s + _CHUNK]]
    return best, score


def spherical_kmeans(x: np.ndarray, n_clusters: int, iters: int, seed: int):
    """Deterministic k-means on the unit sphere.

    Seeds with distinct sampled points; a cluster left empty is re-seeded
    with the point currently farthest from its own centroid.
    """
    rng = np.random.default_rng([seed, 55])
    cent = x[np.sort(rng.choice(len(x), n_clusters, replace=False))].copy()
    for _ in range(iters):
        assign, score = _argmax_rows(x, cent)
        counts = np.bincount(assign, minlength=n_clusters)
        sums = np.zeros_like(cent)
        np.add.at(sums, assign, x)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            far = np.lexsort((np.arange(len(x)), score))[: len(empty)]
            sums[empty] = x[far]
            counts[empty] = 1
        norms = np.linalg.norm(sums, axis=1, keepdims=True)
        cent = np.where(norms > 0, sums / np.where(norms > 0, norms, 1.0), cent)
    return cent


def build_ivf(ids, vectors, n_clusters: int, kmeans_iters: int = KMEANS_ITERS, seed: int = 0,
              dim: int | None = None) -> EmbeddingIndex:
    ids, vecs = _prepare(ids, vectors, dim)
    n = len(ids)
    if not 1 <= n_clusters <= max(n, 1) or (n == 0 and n_clusters > 0):
        raise ConfigError(f"n_clusters must be in [1, N={n}], got {n_clusters}")
    x = vecs.astype(np.float64)
    cent = spherical_kmeans(x, n_clusters, kmeans_iters, seed).astype(np.float32)
    # posting lists come from the stored (float32) centroids so search sees the same cells
    assign, _ = _argmax_rows(x, cent.astype(np.float64))
    order = np.argsort(assign, kind="stable")
    bounds = np.searchsorted(assign[order], np.arange(n_clusters + 1))
    postings = [order[bounds[c] : bounds[c + 1]].astype(np.uint32) for c in range(n_clusters)]
    return EmbeddingIndex("ivf", vecs.shape[1], ids, vecs, cent, postings)


def default_ivf_clusters(n: int) -> int:
    return max(1, int(np.ceil(np.sqrt(n))))


def _float32_slack(dim: int) -> float:
    # bound on |float32 dot - exact dot| for two vectors of norm <= 1 + NORM_TOL
    return 2.0 * (dim + 2) * 2.0**-24 * (1.0 + NORM_TOL) ** 2


def _top_k(vectors: np.ndarray, rows: np.ndarray | None, ids: np.ndarray, q: np.ndarray, k: int):
    cand = vectors if rows is None else vectors[rows]
    n = len(cand)
    if n == 0:
        return np.zeros(0, dtype=np.uint64), np.zeros(0)
    if n > k:
        s32 = cand @ q.astype(np.float32)
        kth = np.partition(s32, n - k)[n - k]
        keep = np.flatnonzero(s32 >= kth - _float32_slack(len(q)))
    else:
        keep = np.arange(n)
    scores = cand[keep].astype(np.float64) @ q
    cand_ids = ids[keep] if rows is None else ids[rows[keep]]
    order = np.lexsort((cand_ids, -scores))[:k]
    return cand_ids[order], scores[order]


def search(index: EmbeddingIndex, qv, k: int, nprobe: int | None = None) -> SearchResult:
    """Top-``k`` items by dot product, ties by ascending item id.

    ``nprobe`` (IVF only) is the number of nearest cells scanned; it defaults
    to ``index.default_nprobe()`` and is ignored by the exact variant.
    """
    q = np.asarray(qv, dtype=np.float64).reshape(-1)
    if len(q) != index.dim:
        raise ShapeError(f"query dim {len(q)} != index dim {index.dim}")
    if abs(np.linalg.norm(q) - 1.0) > NORM_TOL:
        raise ShapeError("query vector is not unit norm")
    if k < 1:
        raise ConfigError("k must be >= 1")
    if index.variant == "exact" or len(index) == 0:
        ids, scores = _top_k(index.vectors, None, index.item_ids, q, k)
        return SearchResult(ids, scores)
    nprobe = index.default_nprobe() if nprobe is None else int(nprobe)
    if not 1 <= nprobe <= index.n_clusters:
        raise ConfigError(f"nprobe must be in [1, {index.n_clusters}], got {nprobe}")
    csims = index.centroids.astype(np.float64) @ q
    cells = np.lexsort((np.arange(len(csims)), -csims))[:nprobe]
    rows = np.concatenate([index.postings[c] for c in cells]).astype(np.int64)
    ids, scores = _top_k(index.vectors, rows, index.item_ids, q, k)
    return SearchResult(ids, scores)


def brute_force_search(index: EmbeddingIndex, qv, k: int) -> SearchResult:
    """Reference O(N*d) float64 scan with a full sort; used as a test oracle."""
    q = np.asarray(qv, dtype=np.float64)
    scores = index.vectors.astype(np.float64) @ q
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], int(index.item_ids[i])))[:k]
    return SearchResult(index.item_ids[order], scores[order])


# ---------------------------------------------------------------- persistence


def to_bytes(index: EmbeddingIndex) -> bytes:
    buf = io.BytesIO()
    variant = EXACT if index.variant == "exact" else IVF
    buf.write(_HEADER.pack(MAGIC, VERSION, variant, index.dim, len(index)))
    buf.write(index.item_ids.astype("<u8").tobytes())
    buf.write(index.vectors.astype("<f4").tobytes())
    if variant == IVF:
        buf.write(struct.pack("<I", index.n_clusters))
        buf.write(index.centroids.astype("<f4").tobytes())
        for p in index.postings:
            buf.write(struct.pack("<I", len(p)))
            buf.write(p.astype("<u4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<Q", crc64(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"unexpected end of data reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size, what), dtype=dtype).copy()


def from_bytes(data: bytes) -> EmbeddingIndex:
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}", 0)
    if len(data) < _HEADER.size:
        raise ChecksumError("file shorter than header", len(data))
    _, version, variant, dim, count = _HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported index version {version} (reader supports {VERSION})", 4)
    if len(data) < _HEADER.size + 8:
        raise ChecksumError("missing checksum trailer", len(data))
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    actual = crc64(body)
    if actual != stored:
        raise ChecksumError(
            f"checksum mismatch: stored {stored:#018x}, computed {actual:#018x}", len(data) - 8
        )
    if variant not in VARIANTS:
        raise FormatError(f"unknown variant {variant}", 8)
    r = _Reader(body)
    r.pos = _HEADER.size
    ids = r.array("<u8", count, "item ids").astype(np.uint64)
    vecs = r.array("<f4", count * dim, "vectors").astype(np.float32).reshape(count, dim)
    centroids = postings = None
    if variant == IVF:
        (n_clusters,) = struct.unpack("<I", r.take(4, "cluster count"))
        centroids = r.array("<f4", n_clusters * dim, "centroids").astype(np.float32).reshape(n_clusters, dim)
        postings = []
        for c in range(n_clusters):
            (length,) = struct.unpack("<I", r.take(4, f"posting length {c}"))
            postings.append(r.array("<u4", length, f"posting list {c}").astype(np.uint32))
        members = np.sort(np.concatenate(postings)) if postings else np.zeros(0, np.uint32)
        if not np.array_equal(members, np.arange(count, dtype=np.uint32)):
            raise FormatError("posting lists do not partition the item rows", r.pos)
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} trailing bytes before checksum", r.pos)
    if len(np.unique(ids)) != count:
        raise FormatError("duplicate item ids in index", _HEADER.size)
    return EmbeddingIndex(VARIANTS[variant], dim, ids, vecs, centroids, postings)


def save_index(index: EmbeddingIndex, path) -> None:
    """Write atomically: a crash never leaves a partial file at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(index))
    os.replace(tmp, path)


def load_index(path) -> EmbeddingIndex:
    return from_bytes(Path(path).read_bytes())
