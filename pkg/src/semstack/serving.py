"""Online serving: semantic search and re-ranking over an immutable artifact set.

The service holds exactly one reference to the current :class:`ArtifactSet`.
Each request reads that reference once and uses it throughout, and a hot swap
replaces it with a single assignment after the new set has been fully loaded
and validated.  A request can therefore never mix towers or index from two
sets, and the manifest hash echoed in every response says which set served it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from . import checkpoint
from .dpr import PairwiseModel, RerankRequest, rerank, K_RERANK
from .dsr import TwoTowerModel, query_embed
from .errors import ArtifactMismatchError, SemstackError
from .features import FeatureConfig, FeatureStats, Featurizer
from .index import EmbeddingIndex, load_index, save_index, search

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
FILES = {
    "dsr_query": "dsr_query.dsrm",
    "index": "items.eidx",
    "dpr": "ranker.dprm",
    "features": "features.json",
    "stats": "stats.json",
}
LATENCY_BUCKETS_MS = (0.5, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass(eq=False)
class ArtifactSet:
    query_model: TwoTowerModel
    index: EmbeddingIndex
    ranker: PairwiseModel
    featurizer: Featurizer
    manifest: dict
    manifest_hash: str
    directory: str = ""


def export_artifacts(directory, dsr_model: TwoTowerModel, index: EmbeddingIndex,
                     dpr_model: PairwiseModel, config: FeatureConfig, stats: FeatureStats) -> str:
    """Write an artifact set plus its manifest; returns the manifest hash."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    checkpoint.save_checkpoint(dsr_model, d / FILES["dsr_query"], query_only=True)
    save_index(index, d / FILES["index"])
    checkpoint.save_checkpoint(dpr_model, d / FILES["dpr"])
    config.save(d / FILES["features"])
    stats.save(d / FILES["stats"])
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "files": {k: {"path": v, "sha256": sha256_file(d / v)} for k, v in FILES.items()},
        "dims": {"embedding": index.dim, "index_items": len(index)},
    }
    data = json.dumps(manifest, sort_keys=True, indent=1).encode()
    (d / MANIFEST).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _check_consistency(q: TwoTowerModel, index: EmbeddingIndex, ranker: PairwiseModel,
                       config: FeatureConfig):
    if q.dim != index.dim:
        raise ArtifactMismatchError(f"query tower dim {q.dim} != index dim {index.dim}")
    qrows = q.query_tower.tables["query"].rows
    if qrows != config.query_buckets:
        raise ArtifactMismatchError(f"query tower buckets {qrows} != feature config {config.query_buckets}")
    tables = ranker.tower.tables
    for field_name, want in (("query", config.query_buckets), ("item", config.item_buckets),
                             ("user", config.action_buckets)):
        if tables[field_name].rows != want:
            raise ArtifactMismatchError(
                f"ranker {field_name} buckets {tables[field_name].rows} != feature config {want}")
    if (ranker.user_numeric_dim, ranker.item_numeric_dim) != (config.user_numeric_dim,
                                                               config.item_numeric_dim):
        raise ArtifactMismatchError("ranker numeric dims disagree with the feature config")


def load_artifact_set(directory) -> ArtifactSet:
    """Load and fully validate; raises ArtifactMismatchError on any inconsistency."""
    d = Path(directory)
    try:
        raw = (d / MANIFEST).read_bytes()
        manifest = json.loads(raw)
    except (OSError, ValueError) as exc:
        raise ArtifactMismatchError(f"cannot read manifest in {d}: {exc}") from None
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ArtifactMismatchError(f"unsupported manifest schema {manifest.get('schema_version')!r}")
    files = manifest.get("files", {})
    for key in FILES:
        if key not in files:
            raise ArtifactMismatchError(f"manifest lacks {key}")
        path = d / files[key]["path"]
        if not path.exists():
            raise ArtifactMismatchError(f"missing artifact file {path}")
        if sha256_file(path) != files[key]["sha256"]:
            raise ArtifactMismatchError(f"content hash mismatch for {path}")
    try:
        q = checkpoint.load_dsr(d / files["dsr_query"]["path"])
        index = load_index(d / files["index"]["path"])
        ranker = checkpoint.load_dpr(d / files["dpr"]["path"])
        config = FeatureConfig.load(d / files["features"]["path"])
        stats = FeatureStats.load(d / files["stats"]["path"])
        featurizer = Featurizer(config, stats)
    except SemstackError as exc:
        raise ArtifactMismatchError(f"artifact failed to load: {exc}") from exc
    _check_consistency(q, index, ranker, config)
    return ArtifactSet(q, index, ranker, featurizer, manifest,
                       hashlib.sha256(raw).hexdigest(), str(d))


class RequestError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


class _Telemetry:
    """Per-thread counters merged on read; request threads never share a lock."""

    def __init__(self):
        self._local = threading.local()
        self._shards: list[dict] = []
        self._register = threading.Lock()

    def _shard(self) -> dict:
        shard = getattr(self._local, "shard", None)
        if shard is None:
            shard = {"requests": {}, "errors": {}, "latency": {}}
            with self._register:
                self._shards.append(shard)
            self._local.shard = shard
        return shard

    def record(self, route: str, status: int, ms: float):
        s = self._shard()
        s["requests"][route] = s["requests"].get(route, 0) + 1
        if status >= 400:
            key = f"{route} {status}"
            s["errors"][key] = s["errors"].get(key, 0) + 1
        bucket = next((str(b) for b in LATENCY_BUCKETS_MS if ms <= b), "+Inf")
        hist = s["latency"].setdefault(route, {})
        hist[bucket] = hist.get(bucket, 0) + 1

    def snapshot(self) -> dict:
        out = {"requests": {}, "errors": {}, "latency_ms_histogram": {}}
        for shard in list(self._shards):
            for k, v in list(shard["requests"].items()):
                out["requests"][k] = out["requests"].get(k, 0) + v
            for k, v in list(shard["errors"].items()):
                out["errors"][k] = out["errors"].get(k, 0) + v
            for route, hist in list(shard["latency"].items()):
                merged = out["latency_ms_histogram"].setdefault(route, {})
                for b, v in list(hist.items()):
                    merged[b] = merged.get(b, 0) + v
        return out


def _int_field(body: dict, name: str, default=None):
    v = body.get(name, default)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, int):
        raise RequestError(400, f"invalid_{name}", f"{name} must be an integer")
    return v


class Service:
    def __init__(self, nprobe_default: int | None = None, max_k: int = 1000,
                 k_rerank: int = K_RERANK):
        self._artifacts: ArtifactSet | None = None
        self.nprobe_default = nprobe_default
        self.max_k = max_k
        self.k_rerank = k_rerank
        self.telemetry = _Telemetry()

    @property
    def artifacts(self) -> ArtifactSet | None:
        return self._artifacts

    @property
    def ready(self) -> bool:
        return self._artifacts is not None

    def hot_swap(self, new) -> dict:
        """Install a new artifact set (an ArtifactSet or a directory).

        Validation happens before the switch; on failure the current set stays
        in place and the error propagates.
        """
        if not isinstance(new, ArtifactSet):
            new = load_artifact_set(new)
        if self.nprobe_default is not None and new.index.variant == "ivf" \
                and not 1 <= self.nprobe_default <= new.index.n_clusters:
            raise ArtifactMismatchError("nprobe default out of range for the new index")
        old = self._artifacts
        self._artifacts = new
        log.info("artifact set %s installed", new.manifest_hash[:12])
        return {
            "swapped": old is None or old.manifest_hash != new.manifest_hash,
            "previous": old.manifest_hash if old else None,
            "current": new.manifest_hash,
        }

    load = hot_swap

    # ------------------------------------------------------------ handlers

    def search(self, body: dict) -> dict:
        arts = self._require()
        query = body.get("query")
        if not isinstance(query, str):
            raise RequestError(400, "invalid_query", "query must be a string")
        k = _int_field(body, "k", 10)
        if not 1 <= k <= self.max_k:
            raise RequestError(400, "invalid_k", f"k must be in [1, {self.max_k}]")
        nprobe = _int_field(body, "nprobe", self.nprobe_default)
        if nprobe is not None and arts.index.variant == "ivf" and not 1 <= nprobe <= arts.index.n_clusters:
            raise RequestError(400, "invalid_nprobe", f"nprobe must be in [1, {arts.index.n_clusters}]")
        qv = query_embed(arts.query_model, arts.featurizer.query(query))
        res = search(arts.index, qv, k, nprobe)
        return {
            "results": [{"item_id": i, "score": s} for i, s in res.pairs()],
            "manifest_hash": arts.manifest_hash,
        }

    def rerank(self, body: dict) -> dict:
        arts = self._require()
        fz = arts.featurizer
        try:
            query = fz.query(body["query"])
            user_body = body.get("user") or {}
            user = fz.user(list(user_body.get("history", [])),
                           np.asarray(user_body.get("numeric", [0.0] * fz.config.user_numeric_dim), float))
            items = [fz.item(int(it["item_id"]), it.get("title", ""), np.asarray(it["numeric"], float))
                     for it in body.get("items", [])]
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise RequestError(400, "invalid_rerank_request", f"malformed rerank request: {exc}") from None
        if len(items) > self.k_rerank:
            raise RequestError(400, "too_many_items", f"at most {self.k_rerank} items per request")
        if len({it.item_id for it in items}) != len(items):
            raise RequestError(400, "duplicate_items", "item ids must be unique")
        result = rerank(arts.ranker, RerankRequest(user, query, items), self.k_rerank)
        return {
            "results": [{"item_id": i, "score": s} for i, s in result.ranked],
            "manifest_hash": arts.manifest_hash,
        }

    def healthz(self) -> tuple[int, dict]:
        arts = self._artifacts
        if arts is None:
            return 503, {"ready": False, "manifest_hash": None}
        return 200, {"ready": True, "manifest_hash": arts.manifest_hash, "manifest": arts.manifest}

    def _require(self) -> ArtifactSet:
        arts = self._artifacts
        if arts is None:
            raise RequestError(503, "not_ready", "artifacts not loaded")
        return arts

    def handle(self, method: str, path: str, raw: bytes = b"") -> tuple[int, dict]:
        """Transport-independent dispatch; returns (HTTP status, JSON body)."""
        t0 = time.perf_counter()
        route = path.split("?", 1)[0]
        try:
            status, body = self._dispatch(method, route, raw)
        except RequestError as exc:
            status, body = exc.status, {"error": {"code": exc.code, "message": str(exc)}}
        except SemstackError as exc:
            status, body = 400, {"error": {"code": exc.category, "message": str(exc)}}
        ms = (time.perf_counter() - t0) * 1e3
        if route in ("/search", "/rerank"):
            body["latency_ms"] = ms
        body["schema_version"] = SCHEMA_VERSION
        self.telemetry.record(route, status, ms)
        return status, body

    def _dispatch(self, method, route, raw):
        if route == "/healthz" and method == "GET":
            return self.healthz()
        if route == "/metrics" and method == "GET":
            return 200, self.telemetry.snapshot()
        if route in ("/search", "/rerank"):
            if method != "POST":
                raise RequestError(405, "method_not_allowed", f"{route} takes POST")
            try:
                body = json.loads(raw or b"{}")
            except ValueError:
                raise RequestError(400, "invalid_json", "request body is not JSON") from None
            if not isinstance(body, dict):
                raise RequestError(400, "invalid_json", "request body must be a JSON object")
            version = body.get("schema_version", SCHEMA_VERSION)
            if version != SCHEMA_VERSION:
                raise RequestError(400, "unsupported_schema", f"schema_version {version!r} not supported")
            return 200, (self.search(body) if route == "/search" else self.rerank(body))
        raise RequestError(404, "not_found", f"no route {method} {route}")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "semstack"

    def _respond(self, method):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        status, body = self.server.service.handle(method, self.path, raw)
        data = json.dumps(body, sort_keys=True).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        self._respond("GET")

    def do_POST(self):
        self._respond("POST")

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)


class SearchServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, service: Service):
        super().__init__(address, _Handler)
        self.service = service


def serve(service: Service, host: str = "127.0.0.1", port: int = 8080) -> SearchServer:
    """Bind and return the server; call ``serve_forever`` (or run it in a thread)."""
    return SearchServer((host, port), service)
