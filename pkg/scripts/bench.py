"""Search latency and throughput against index size, exact and IVF.

    python scripts/bench.py [--sizes 250000 500000 1000000] [--dim 64]

Prints one row per (variant, size) with the three benchmark-table columns,
and the latency ratio between consecutive sizes.
"""
import argparse
import json
import time

import numpy as np
from threadpoolctl import threadpool_limits

from semstack.eval import bench_search, clustered_unit_vectors, random_unit_vectors
from semstack.index import build_exact, build_ivf, default_ivf_clusters


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[250_000, 500_000, 1_000_000])
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--n-queries", type=int, default=200)
    ap.add_argument("--variants", nargs="+", default=["exact", "ivf"], choices=["exact", "ivf"])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    queries = random_unit_vectors(args.n_queries, args.dim, seed=args.seed + 1, dtype=np.float64)
    rows = []
    with threadpool_limits(1):
        for variant in args.variants:
            previous = None
            for n in args.sizes:
                vecs = clustered_unit_vectors(n, args.dim, max(1, n // 1000), 0.35, args.seed)
                ids = np.arange(n, dtype=np.uint64)
                t0 = time.perf_counter()
                index = build_exact(ids, vecs) if variant == "exact" else build_ivf(
                    ids, vecs, default_ivf_clusters(n), seed=args.seed)
                build_s = time.perf_counter() - t0
                rep = bench_search(index, queries, concurrency=(1,), build_seconds=build_s)
                row = {"variant": variant, "n": n, **rep.table(), "p99 (ms)": rep.p99_ms}
                if previous:
                    row["latency ratio vs previous"] = rep.mean_ms / previous
                previous = rep.mean_ms
                rows.append(row)
                print(json.dumps(row), flush=True)
                del index, vecs


if __name__ == "__main__":
    main()
