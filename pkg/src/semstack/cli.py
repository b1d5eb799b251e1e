"""Command-line entry point: ``semstack <subcommand> [flags]``.

Every subcommand reads and writes inside one run directory (``--out``).
Input flags default to the file the producing subcommand writes there, so
``datagen -> train-dsr -> build-index -> train-dpr -> eval-* -> bench`` runs
with no flags beyond ``--out``.  Each run writes ``manifest-<subcommand>.json``
holding the config snapshot and the sha256 of every output.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import signal
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, checkpoint, datagen, pipeline
from .dpr import DprTrainConfig, K_RERANK, train_dpr
from .dsr import DsrTrainConfig, train_dsr
from .errors import SemstackError
from .eval import bench_search, clustered_unit_vectors
from .features import FeatureConfig, FeatureStats, Featurizer
from .index import build_exact, build_ivf, default_ivf_clusters, load_index, save_index
from .serving import Service, export_artifacts, serve

log = logging.getLogger("semstack")

MANIFEST_SCHEMA = 1
ENV_ARTIFACTS = "SEMSTACK_ARTIFACTS"

# run-directory file names, shared between producers and consumers
F = {
    "catalog": "catalog.jsonl",
    "sessions": "sessions.jsonl",
    "sidecars": "sidecars.jsonl",
    "triplets": "triplets.jsonl",
    "pairs": "pairs.jsonl",
    "queries": "queries.jsonl",
    "features": "features.json",
    "stats": "stats.json",
    "dsr": "dsr.dsrm",
    "dsr_history": "dsr_history.json",
    "dpr": "dpr.dprm",
    "dpr_history": "dpr_history.json",
    "index": "items.eidx",
    "eval_retrieval": "eval_retrieval.json",
    "eval_ranking": "eval_ranking.json",
    "bench": "bench.json",
    "artifacts": "artifacts",
}


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    def _get_help_string(self, action):
        if action.default is None or "default:" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


# ---------------------------------------------------------------- helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _input(args, name: str) -> Path:
    """Resolve an input flag (default: the run-directory file) and require it to exist."""
    given = getattr(args, name, None)
    path = Path(given) if given else Path(args.out) / F[name]
    if not path.exists():
        raise FileNotFoundError(f"missing input file {path} (--{name.replace('_', '-')})")
    return path


def _snapshot(args) -> dict:
    out = Path(args.out).resolve()
    snap = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "out"):
            continue
        if isinstance(value, str) and key in F and value:
            p = Path(value).resolve()
            value = os.path.relpath(p, out) if p.is_relative_to(out) else str(p)
        if isinstance(value, tuple):
            value = list(value)
        snap[key] = value
    return snap


def _write_manifest(args, outputs: dict[str, Path], volatile: tuple[str, ...] = ()) -> Path:
    """Record the config and output hashes; volatile outputs (timings) are listed unhashed."""
    entries = {}
    for name, path in sorted(outputs.items()):
        if name in volatile:
            entries[name] = {"path": path.name, "volatile": True}
        elif path.is_dir():
            entries[name] = {"path": path.name,
                             "files": {p.name: _sha256(p) for p in sorted(path.iterdir()) if p.is_file()}}
        else:
            entries[name] = {"path": path.name, "sha256": _sha256(path)}
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "package_version": __version__,
        "subcommand": args.command,
        "config": _snapshot(args),
        "outputs": entries,
    }
    path = Path(args.out) / f"manifest-{args.command}.json"
    _write_json(path, manifest)
    return path


def _featurized_catalog(args):
    catalog = datagen.read_catalog(_input(args, "catalog"))
    config = FeatureConfig.load(_input(args, "features"))
    stats = FeatureStats.load(_input(args, "stats"))
    return catalog, datagen.CatalogFeatures(catalog, Featurizer(config, stats))


# ---------------------------------------------------------------- subcommands


def cmd_datagen(args) -> dict:
    out = Path(args.out)
    cat_cfg = datagen.CatalogConfig(n_items=args.n_items, n_clusters=args.n_clusters)
    ses_cfg = datagen.SessionConfig(n_sessions=args.n_sessions, n_users=args.n_users,
                                    presented_per_session=args.presented,
                                    presentation=args.presentation)
    catalog = datagen.generate_catalog(cat_cfg, args.seed)
    sessions, sidecars = datagen.generate_sessions(catalog, ses_cfg, args.seed)
    train = [s for s in sessions if s.split == "train"]
    policy = datagen.TripletPolicy(args.negatives_per_positive, args.easy_prob)
    tstats = datagen.TripletStats()
    triplets = datagen.make_triplets(train, catalog, policy, args.seed, tstats)
    pairs = datagen.make_pairs(train, click_pairs=args.click_pairs)
    queries = datagen.held_out_queries(catalog, args.n_queries, args.seed)
    fconfig = datagen.feature_config(catalog, args.buckets)
    fstats = datagen.fit_stats(catalog, train, fconfig)

    paths = {k: out / F[k] for k in ("catalog", "sessions", "sidecars", "triplets", "pairs",
                                     "queries", "features", "stats")}
    datagen.write_catalog(paths["catalog"], catalog)
    datagen.write_jsonl(paths["sessions"], sessions)
    datagen.write_jsonl(paths["sidecars"], sidecars)
    datagen.write_jsonl(paths["triplets"], triplets)
    datagen.write_jsonl(paths["pairs"], pairs)
    datagen.write_queries(paths["queries"], queries)
    fconfig.save(paths["features"])
    fstats.save(paths["stats"])
    print(f"catalog {len(catalog.items)} items / {catalog.n_clusters} clusters; "
          f"{len(sessions)} sessions ({len(train)} train); {len(triplets)} triples "
          f"({tstats.hard_fallbacks} hard->easy fallbacks); {len(pairs)} pairs; {len(queries)} queries")
    return paths


def cmd_train_dsr(args) -> dict:
    out = Path(args.out)
    triplets_path = _input(args, "triplets")
    _, cf = _featurized_catalog(args)
    records = datagen.read_triplets(triplets_path)
    config = DsrTrainConfig(margin=args.margin, epochs=args.epochs, batch_size=args.batch_size,
                            lr=args.lr, seed=args.seed, embedding_dim=args.embedding_dim,
                            widths=tuple(args.widths))
    result = train_dsr(datagen.triplet_data(records, cf), config)
    paths = {"dsr": out / F["dsr"], "dsr_history": out / F["dsr_history"]}
    checkpoint.save_checkpoint(result.model, paths["dsr"])
    _write_json(paths["dsr_history"], {"schema_version": MANIFEST_SCHEMA, "config": config.to_dict(),
                                       "mean_hinge_loss": result.history})
    print(f"trained DSR on {len(records)} triples; loss per epoch "
          + " ".join(f"{x:.4f}" for x in result.history))
    return paths


def cmd_train_dpr(args) -> dict:
    out = Path(args.out)
    pairs_path = _input(args, "pairs")
    _, cf = _featurized_catalog(args)
    records = datagen.read_pairs(pairs_path)
    config = DprTrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                            seed=args.seed, embedding_dim=args.embedding_dim,
                            widths=tuple(args.widths))
    result = train_dpr(datagen.pair_data(records, cf), config)
    paths = {"dpr": out / F["dpr"], "dpr_history": out / F["dpr_history"]}
    checkpoint.save_checkpoint(result.model, paths["dpr"])
    _write_json(paths["dpr_history"], {"schema_version": MANIFEST_SCHEMA, "config": config.to_dict(),
                                       "mean_pairwise_loss": result.history})
    print(f"trained DPR on {len(records)} pairs; loss per epoch "
          + " ".join(f"{x:.4f}" for x in result.history))
    return paths


def cmd_build_index(args) -> dict:
    model = checkpoint.load_dsr(_input(args, "dsr"))
    _, cf = _featurized_catalog(args)
    if model.item_tower is None:
        raise SemstackError(f"{args.dsr or F['dsr']} holds no item tower; pass the full training checkpoint")
    t0 = time.perf_counter()
    index = pipeline.build_item_index(model, cf, args.variant, args.n_clusters, args.kmeans_iters, args.seed)
    build_s = time.perf_counter() - t0
    path = Path(args.out) / F["index"]
    save_index(index, path)
    extra = f", {index.n_clusters} clusters" if index.variant == "ivf" else ""
    print(f"built {index.variant} index over {len(index)} items{extra} in {build_s:.2f}s")
    return {"index": path}


def cmd_eval_retrieval(args) -> dict:
    model = checkpoint.load_dsr(_input(args, "dsr"))
    index = load_index(_input(args, "index"))
    catalog, cf = _featurized_catalog(args)
    queries = datagen.read_queries(_input(args, "queries"))
    if args.n_queries:
        queries = queries[: args.n_queries]
    report = pipeline.eval_retrieval(model, index, catalog, cf, queries, args.k, args.nprobe, args.cases)
    report["schema_version"] = MANIFEST_SCHEMA
    path = Path(args.out) / F["eval_retrieval"]
    _write_json(path, report)
    print(f"recall@{args.k} {report['recall_at_k']:.4f} over {report['n_queries']} queries "
          f"(random baseline {report['random_baseline']:.4f} +- {report['random_baseline_sigma']:.4f})")
    for case in report["cases"]:
        top = ", ".join(f"{it['title']} [c{it['cluster']}]" for it in case["items"][:3])
        print(f"  {case['query']!r} [c{case['query_cluster']}] -> {top}")
    return {"eval_retrieval": path}


def cmd_eval_ranking(args) -> dict:
    model = checkpoint.load_dpr(_input(args, "dpr"))
    _, cf = _featurized_catalog(args)
    sessions = [s for s in datagen.read_sessions(_input(args, "sessions")) if s.split == args.split]
    sidecars = datagen.read_sidecars(_input(args, "sidecars"))
    report = pipeline.eval_ranking(model, cf, sessions, sidecars, args.seed)
    report["schema_version"] = MANIFEST_SCHEMA
    report["split"] = args.split
    path = Path(args.out) / F["eval_ranking"]
    _write_json(path, report)
    print(f"{'scorer':8s} {'session AUC':>12s} {'order NDCG@5':>13s}")
    for name in ("model", "oracle", "random"):
        r = report[name]
        print(f"{name:8s} {r['session_auc']:12.4f} {r['ndcg@5']:13.4f}")
    print(f"{report['n_sessions']} sessions scored, {report['n_excluded']} excluded (one class only)")
    return {"eval_ranking": path}


def cmd_bench(args) -> dict:
    if args.synthetic:
        vecs = clustered_unit_vectors(args.synthetic, args.dim, max(1, args.synthetic // 1000), 0.35, args.seed)
        ids = np.arange(args.synthetic, dtype=np.uint64)
        t0 = time.perf_counter()
        if args.variant == "ivf":
            index = build_ivf(ids, vecs, args.n_clusters or default_ivf_clusters(len(ids)), seed=args.seed)
        else:
            index = build_exact(ids, vecs)
        build_s = time.perf_counter() - t0
        dim = args.dim
    else:
        index = load_index(_input(args, "index"))
        build_s = 0.0
        dim = index.dim
    rng = np.random.default_rng([args.seed, 77])
    queries = rng.standard_normal((args.n_queries, dim))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    report = bench_search(index, queries, args.k, args.nprobe, tuple(args.concurrency), build_s)
    path = Path(args.out) / F["bench"]
    path.write_text(report.to_json() + "\n", encoding="utf-8")
    print(json.dumps(report.table(), indent=1))
    return {"bench": path}


def cmd_export(args) -> dict:
    model = checkpoint.load_dsr(_input(args, "dsr"))
    index = load_index(_input(args, "index"))
    ranker = checkpoint.load_dpr(_input(args, "dpr"))
    config = FeatureConfig.load(_input(args, "features"))
    stats = FeatureStats.load(_input(args, "stats"))
    path = Path(args.out) / F["artifacts"]
    digest = export_artifacts(path, model, index, ranker, config, stats)
    print(f"artifact set written to {path} (manifest {digest[:12]})")
    return {"artifacts": path}


def cmd_serve(args) -> dict:
    directory = os.environ.get(ENV_ARTIFACTS) or args.artifacts or str(Path(args.out) / F["artifacts"])
    service = Service(nprobe_default=args.nprobe_default, max_k=args.max_k, k_rerank=args.k_rerank)
    service.hot_swap(directory)  # refuses to start on a mismatched set
    server = serve(service, args.host, args.port)
    print(f"serving {directory} on http://{args.host}:{server.server_address[1]}", flush=True)

    def reload(signum, frame):
        try:
            print(json.dumps(service.hot_swap(directory)), flush=True)
        except SemstackError as exc:
            print(f"error[{exc.category}]: reload rejected: {exc}", file=sys.stderr, flush=True)

    if hasattr(signal, "SIGHUP"):
        signal.signal(signal.SIGHUP, reload)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return {}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--out", default="run", help="run directory for inputs and outputs")
    g.add_argument("--seed", type=int, default=0, help="master random seed")
    g.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                   help="pin BLAS to one thread so outputs are bit-reproducible")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    def inputs(p, *names):
        for n in names:
            p.add_argument(f"--{n.replace('_', '-')}", dest=n, default=None,
                           help=f"input file (default: <out>/{F[n]})")

    parser = argparse.ArgumentParser(prog="semstack", description=__doc__, formatter_class=_Formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_, formatter_class=_Formatter)
        p.set_defaults(func=func)
        return p

    p = add("datagen", cmd_datagen, "generate the synthetic catalog, sessions, training records and queries")
    p.add_argument("--n-items", type=int, default=datagen.CatalogConfig.n_items)
    p.add_argument("--n-clusters", type=int, default=datagen.CatalogConfig.n_clusters)
    p.add_argument("--n-sessions", type=int, default=datagen.SessionConfig.n_sessions)
    p.add_argument("--n-users", type=int, default=datagen.SessionConfig.n_users)
    p.add_argument("--presented", type=int, default=datagen.SessionConfig.presented_per_session,
                   help="items presented per session")
    p.add_argument("--presentation", choices=("random", "utility"), default="random",
                   help="order of presented items")
    p.add_argument("--n-queries", type=int, default=500, help="held-out retrieval queries")
    p.add_argument("--negatives-per-positive", type=int, default=datagen.TripletPolicy.negatives_per_positive)
    p.add_argument("--easy-prob", type=float, default=datagen.TripletPolicy.easy_prob,
                   help="probability a negative is drawn from another cluster")
    p.add_argument("--click-pairs", action="store_true",
                   help="also emit (clicked, unclicked) ranking pairs")
    p.add_argument("--buckets", type=int, default=1 << 16, help="hash buckets per token field")

    p = add("train-dsr", cmd_train_dsr, "train the two-tower retrieval model on triples")
    inputs(p, "triplets", "catalog", "features", "stats")
    d = DsrTrainConfig()
    p.add_argument("--margin", type=float, default=d.margin)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--embedding-dim", type=int, default=d.embedding_dim)
    p.add_argument("--widths", type=int, nargs="+", default=list(d.widths), help="dense layer widths")

    p = add("train-dpr", cmd_train_dpr, "train the pairwise ranking model on ordered/unordered pairs")
    inputs(p, "pairs", "catalog", "features", "stats")
    d = DprTrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--embedding-dim", type=int, default=d.embedding_dim)
    p.add_argument("--widths", type=int, nargs=3, default=list(d.widths), help="the three ReLU layer widths")

    p = add("build-index", cmd_build_index, "embed the catalog with the item tower and build the index")
    inputs(p, "dsr", "catalog", "features", "stats")
    p.add_argument("--variant", choices=("exact", "ivf"), default="exact")
    p.add_argument("--n-clusters", type=int, default=None, help="IVF clusters (default: ceil(sqrt(N)))")
    p.add_argument("--kmeans-iters", type=int, default=20)

    p = add("eval-retrieval", cmd_eval_retrieval, "recall@k of same-cluster items on held-out queries")
    inputs(p, "dsr", "index", "queries", "catalog", "features", "stats")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--nprobe", type=int, default=None, help="IVF clusters probed (default: index default)")
    p.add_argument("--n-queries", type=int, default=0, help="evaluate only the first N queries (0 = all)")
    p.add_argument("--cases", type=int, default=5, help="sample retrievals included in the report")

    p = add("eval-ranking", cmd_eval_ranking, "session AUC and NDCG@5 of the ranker on held-out sessions")
    inputs(p, "dpr", "sessions", "sidecars", "catalog", "features", "stats")
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = add("bench", cmd_bench, "time index search; reports indexing (sec.), search (ms) and QPS")
    inputs(p, "index")
    p.add_argument("--synthetic", type=int, default=0,
                   help="bench a freshly built index over N synthetic vectors instead of --index")
    p.add_argument("--dim", type=int, default=64, help="dimension of synthetic vectors")
    p.add_argument("--variant", choices=("exact", "ivf"), default="exact", help="synthetic index variant")
    p.add_argument("--n-clusters", type=int, default=None, help="IVF clusters for --synthetic (default: ceil(sqrt(N)))")
    p.add_argument("--n-queries", type=int, default=1000)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--nprobe", type=int, default=None, help="IVF clusters probed (default: index default)")
    p.add_argument("--concurrency", type=int, nargs="+", default=[1, 2, 4])

    p = add("export", cmd_export, "assemble the serving artifact set (query tower, index, ranker, features)")
    inputs(p, "dsr", "index", "dpr", "features", "stats")

    p = add("serve", cmd_serve, "serve /search, /rerank, /healthz and /metrics over HTTP")
    p.add_argument("--artifacts", default=None,
                   help=f"artifact directory (default: <out>/{F['artifacts']}; ${ENV_ARTIFACTS} overrides)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--nprobe-default", type=int, default=None,
                   help="IVF clusters probed when a request omits nprobe (default: index default)")
    p.add_argument("--max-k", type=int, default=1000)
    p.add_argument("--k-rerank", type=int, default=K_RERANK, help="maximum items per rerank request")

    for sp in sub.choices.values():
        for action in sp._actions:
            if action.help is None:
                action.help = "(default: %(default)s)"
    return parser


def _error(category: str, message: str) -> None:
    print(f"error[{category}]: {message}", file=sys.stderr)


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.command != "serve":
        Path(args.out).mkdir(parents=True, exist_ok=True)
    limits = threadpool_limits(limits=1) if args.deterministic else contextlib.nullcontext()
    try:
        with limits:
            outputs = args.func(args)
    except FileNotFoundError as exc:
        _error("input", str(exc) if exc.filename is None else f"missing input file {exc.filename}")
        return 3
    except SemstackError as exc:
        _error(exc.category, str(exc))
        return 2
    except (ValueError, KeyError, TypeError) as exc:
        _error("config", f"{type(exc).__name__}: {exc}")
        return 2
    except OSError as exc:
        _error("io", str(exc))
        return 4
    if args.command != "serve":
        path = _write_manifest(args, outputs, volatile=("bench",))
        print(f"manifest: {path}")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
