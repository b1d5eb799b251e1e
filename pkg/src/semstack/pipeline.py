"""Glue between datagen, the two models, the index and the metrics.

These are the operations behind the CLI subcommands, kept importable so
tests and scripts can run the pipeline without going through argv.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datagen import CatalogFeatures, SessionLog, SessionSidecar, SyntheticCatalog
from .dpr import PairwiseModel, tower_logits
from .dsr import TwoTowerModel
from .eval import ScoredSession, ranking_report, recall_at_k
from .index import EmbeddingIndex, build_exact, build_ivf, default_ivf_clusters, search
from .nn import Bag

EMBED_BATCH = 4096


def embed_catalog(model: TwoTowerModel, cf: CatalogFeatures) -> np.ndarray:
    rows = np.arange(len(cf.item_ids))
    parts = [
        model.embed_items(cf.tokens.bag(rows[s : s + EMBED_BATCH]), cf.numeric[s : s + EMBED_BATCH])
        for s in range(0, len(rows), EMBED_BATCH)
    ]
    return np.concatenate(parts) if parts else np.zeros((0, model.dim))


def build_item_index(model: TwoTowerModel, cf: CatalogFeatures, variant: str = "exact",
                     n_clusters: int | None = None, kmeans_iters: int = 20, seed: int = 0
                     ) -> EmbeddingIndex:
    vecs = embed_catalog(model, cf)
    if variant == "exact":
        return build_exact(cf.item_ids, vecs, model.dim)
    n_clusters = n_clusters or default_ivf_clusters(len(vecs))
    return build_ivf(cf.item_ids, vecs, n_clusters, kmeans_iters, seed, model.dim)


def embed_query_texts(model: TwoTowerModel, cf: CatalogFeatures, texts: Sequence[str]) -> np.ndarray:
    return model.embed_queries(Bag.from_lists([cf.query(t).tokens.ids for t in texts]))


@dataclass
class RetrievalBaseline:
    mean: float
    sigma: float


def random_recall_baseline(n_items: int, relevant_sizes: Sequence[int], k: int) -> RetrievalBaseline:
    """Mean and standard error of capped recall@k when top-k is a uniform random subset.

    Hits per query are hypergeometric(N, |relevant|, k).
    """
    n = n_items
    means, variances = [], []
    for r in relevant_sizes:
        cap = min(r, k)
        p = r / n
        mean_hits = k * p
        var_hits = k * p * (1 - p) * (n - k) / (n - 1) if n > 1 else 0.0
        means.append(mean_hits / cap)
        variances.append(var_hits / cap**2)
    q = len(relevant_sizes)
    return RetrievalBaseline(float(np.mean(means)), math.sqrt(sum(variances)) / q)


def eval_retrieval(model: TwoTowerModel, index: EmbeddingIndex, catalog: SyntheticCatalog,
                   cf: CatalogFeatures, queries: Sequence[tuple[str, int]], k: int = 10,
                   nprobe: int | None = None, n_cases: int = 5) -> dict:
    """Recall@k of same-cluster items for held-out queries, plus sample retrievals."""
    members = catalog.members()
    item_cluster = {it.item_id: it.cluster for it in catalog.items}
    qv = embed_query_texts(model, cf, [t for t, _ in queries])
    capped, plain, cases = [], [], []
    for i, (vec, (text, cluster)) in enumerate(zip(qv, queries)):
        res = search(index, vec, k, nprobe)
        got = [int(x) for x in res.ids]
        relevant = {int(cf.item_ids[r]) for r in members[cluster]}
        capped.append(recall_at_k(got, relevant, k, capped=True))
        plain.append(recall_at_k(got, relevant, k))
        if i < n_cases:
            cases.append({
                "query": text,
                "query_cluster": cluster,
                "items": [
                    {"item_id": iid, "title": cf.titles[cf.row[iid]], "cluster": item_cluster[iid],
                     "score": round(float(s), 6)}
                    for iid, s in res.pairs()
                ],
            })
    base = random_recall_baseline(len(index), [len(members[c]) for _, c in queries], k)
    return {
        "k": k,
        "n_queries": len(queries),
        "recall_at_k": float(np.mean(capped)),
        "recall_at_k_uncapped": float(np.mean(plain)),
        "random_baseline": base.mean,
        "random_baseline_sigma": base.sigma,
        "index_variant": index.variant,
        "nprobe": nprobe,
        "cases": cases,
    }


def scored_sessions(model: PairwiseModel, cf: CatalogFeatures, sessions: Sequence[SessionLog]
                    ) -> list[ScoredSession]:
    out = []
    for s in sessions:
        items = [cf.item(p.item_id) for p in s.presented]
        logits = tower_logits(model, cf.user(s.user), cf.query(s.query), items)
        out.append(ScoredSession(s.session_id, [p.item_id for p in s.presented], logits,
                                 [p.ordered for p in s.presented]))
    return out


def eval_ranking(model: PairwiseModel, cf: CatalogFeatures, sessions: Sequence[SessionLog],
                 sidecars: Sequence[SessionSidecar], seed: int = 0) -> dict:
    """Session AUC and NDCG@5 for the model, the planted-utility oracle and random scores."""
    by_id = {sc.session_id: sc for sc in sidecars}
    model_s = scored_sessions(model, cf, sessions)
    rng = np.random.default_rng([seed, 66])
    oracle_s, random_s = [], []
    for s in model_s:
        oracle_s.append(ScoredSession(s.session_id, s.item_ids, by_id[s.session_id].utility, s.ordered))
        random_s.append(ScoredSession(s.session_id, s.item_ids, rng.random(len(s.item_ids)), s.ordered))
    out = {}
    for name, group in (("model", model_s), ("oracle", oracle_s), ("random", random_s)):
        rep = ranking_report(group)
        out[name] = {"session_auc": rep.session_auc, "ndcg@5": rep.ndcg5}
        out["n_sessions"] = rep.n_sessions
        out["n_excluded"] = rep.n_excluded
        out["n_without_orders"] = rep.n_ndcg_no_positive
    return out


def held_out_pair_accuracy(model: PairwiseModel, data) -> float:
    """Fraction of held-out pairs whose logit difference sign matches the label."""
    idx = np.arange(len(data))
    ub, qb, ib, numeric = data.branch_inputs(idx)
    logits = model.logits(ub, qb, ib, numeric)
    delta = logits[: len(idx)] - logits[len(idx):]
    return float(np.mean((delta > 0) == (data.label == 1)))
