"""Synthetic catalog and search logs with planted semantics and planted preference.

Every item belongs to a latent cluster.  Titles draw mostly from a
cluster-specific token pool, but pools overlap and a shared pool of generic
tokens is mixed in, so term matching alone is ambiguous.  Sessions pick a
query cluster, present mostly in-cluster items, and sample clicks and orders
from a hidden utility that depends on item attributes, the user's purchasing
power and the item's semantic match to the query.  The noiseless utility is
kept in a sidecar so an oracle ranking can be scored.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dpr import PairData
from .dsr import TripletData
from .errors import ConfigError
from .features import (
    FeatureConfig,
    FeatureStats,
    Featurizer,
    ItemFeatures,
    NumericFeatures,
    NumericStats,
    QueryFeatures,
    TokenStore,
    UserContext,
)

SCHEMA_VERSION = 1

ITEM_NUMERIC = ["price", "ctr", "cvr", "sale_volume", "rating"]
ITEM_TRANSFORMS = ["log1p_zscore", "zscore", "zscore", "log1p_zscore", "zscore"]
USER_NUMERIC = ["purchasing_power", "activity", "tenure_days"]
USER_TRANSFORMS = ["log1p_zscore", "log1p_zscore", "zscore"]

ITEM_ID_BASE = 1_000_000

_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]


# ---------------------------------------------------------------- config types


@dataclass
class CatalogConfig:
    n_items: int = 5000
    n_clusters: int = 50
    latent_dim: int = 16
    numeric_dim: int = 5
    own_tokens: int = 8
    borrowed_tokens: int = 4
    shared_tokens: int = 40
    title_len: tuple[int, int] = (4, 7)
    cluster_token_prob: float = 0.75
    latent_noise: float = 0.6

    def validate(self):
        if self.n_items < 0 or self.n_clusters < 1 or self.latent_dim < 1:
            raise ConfigError("n_items >= 0, n_clusters >= 1 and latent_dim >= 1 required")
        if self.n_items and self.n_clusters > self.n_items:
            raise ConfigError(f"n_clusters ({self.n_clusters}) > n_items ({self.n_items})")
        if self.numeric_dim < 1:
            raise ConfigError("numeric_dim must be >= 1")


@dataclass
class SessionConfig:
    n_sessions: int = 20000
    n_users: int = 2000
    presented_per_session: int = 20
    max_presented: int = 100
    in_cluster_frac: float = 0.9
    presentation: str = "random"  # or "utility": previous ranker sorts by utility
    utility_weights: dict = field(
        default_factory=lambda: {
            "relevance": 2.0,
            "text_match": 1.5,
            "ctr": 1.5,
            "cvr": 1.8,
            "sale_volume": 1.2,
            "rating": 1.2,
            "price_fit": 0.8,
            "history": 0.3,
        }
    )
    noise_scale: float = 0.4
    # clicks follow query relevance plus this fraction of the non-relevance utility;
    # orders follow the full utility
    click_quality_weight: float = 0.2
    click_scale: float = 3.0
    click_bias: float = -6.5
    position_bias: float = 0.3
    order_scale: float = 3.0
    order_bias: float = -10.0
    test_frac: float = 0.1

    def validate(self, n_items: int):
        if self.presented_per_session > n_items:
            raise ConfigError(
                f"presented_per_session ({self.presented_per_session}) > catalog size ({n_items})"
            )
        if not 1 <= self.presented_per_session <= self.max_presented:
            raise ConfigError(f"presented_per_session must be in [1, {self.max_presented}]")
        if self.presentation not in ("random", "utility"):
            raise ConfigError("presentation must be 'random' or 'utility'")
        if self.n_users < 1:
            raise ConfigError("n_users must be >= 1")


# ---------------------------------------------------------------- records


@dataclass
class CatalogItem:
    item_id: int
    title: str
    numeric: list[float]
    cluster: int
    latent: list[float]


@dataclass
class SyntheticCatalog:
    items: list[CatalogItem]
    n_clusters: int
    centroids: np.ndarray
    pools: list[list[str]]
    shared: list[str]
    numeric_names: list[str]
    numeric_transforms: list[str]

    def __len__(self):
        return len(self.items)

    def by_id(self) -> dict[int, CatalogItem]:
        return {it.item_id: it for it in self.items}

    def members(self) -> list[np.ndarray]:
        clusters = np.array([it.cluster for it in self.items], dtype=np.int64)
        return [np.flatnonzero(clusters == c) for c in range(self.n_clusters)]


@dataclass
class UserRecord:
    user_id: int
    numeric: list[float]
    history: list[int]


@dataclass
class Presented:
    item_id: int
    position: int
    clicked: bool
    ordered: bool


@dataclass
class SessionLog:
    session_id: int
    query: str
    query_cluster: int
    user: UserRecord
    presented: list[Presented]
    split: str = "train"


@dataclass
class SessionSidecar:
    """Hidden per-item quantities for the presented list, in position order."""

    session_id: int
    utility: list[float]
    click_prob: list[float]
    order_prob: list[float]


@dataclass
class TripletRecord:
    session_id: int
    query: str
    query_cluster: int
    positive: int
    negative: int
    hard: bool


@dataclass
class PairRecord:
    session_id: int
    query: str
    user: UserRecord
    item_a: int
    item_b: int
    label: int


@dataclass
class TripletExample:
    query: QueryFeatures
    positive: ItemFeatures
    negative: ItemFeatures


@dataclass
class PairExample:
    user: UserContext
    query: QueryFeatures
    item_a: ItemFeatures
    item_b: ItemFeatures
    label: int


# ---------------------------------------------------------------- catalog


def _vocabulary(rng: np.random.Generator, n_words: int) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < n_words:
        n_syl = int(rng.integers(2, 4))
        w = "".join(_SYLLABLES[i] for i in rng.integers(0, len(_SYLLABLES), n_syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_catalog(config: CatalogConfig, seed: int) -> SyntheticCatalog:
    config.validate()
    rng = np.random.default_rng([seed, 11])
    c, n, d = config.n_clusters, config.n_items, config.latent_dim
    centroids = _unit_rows(rng.normal(size=(c, d)))

    vocab = _vocabulary(rng, c * config.own_tokens + config.shared_tokens)
    shared = vocab[c * config.own_tokens :]
    own = [vocab[k * config.own_tokens : (k + 1) * config.own_tokens] for k in range(c)]
    pools = []
    for k in range(c):
        others = [w for j in range(c) if j != k for w in own[j]]
        n_borrow = min(config.borrowed_tokens, len(others))
        borrowed = [others[i] for i in rng.choice(len(others), n_borrow, replace=False)] if n_borrow else []
        pools.append(own[k] + borrowed)

    clusters = rng.permutation(np.arange(n) % c) if n else np.zeros(0, dtype=np.int64)
    noise = rng.normal(size=(n, d)) * config.latent_noise / np.sqrt(d)
    latents = _unit_rows(centroids[clusters] + noise) if n else np.zeros((0, d))

    # cluster-level price level so purchasing power interacts with category
    cluster_price = rng.normal(4.0, 0.8, size=c)
    names = ITEM_NUMERIC[: config.numeric_dim] + [
        f"attr{j}" for j in range(config.numeric_dim - len(ITEM_NUMERIC))
    ]
    transforms = ITEM_TRANSFORMS[: config.numeric_dim] + ["zscore"] * max(
        0, config.numeric_dim - len(ITEM_NUMERIC)
    )

    items = []
    lo, hi = config.title_len
    for i in range(n):
        k = int(clusters[i])
        length = int(rng.integers(lo, hi + 1))
        from_pool = rng.random(length) < config.cluster_token_prob
        words = [
            pools[k][rng.integers(len(pools[k]))] if fp else shared[rng.integers(len(shared))]
            for fp in from_pool
        ]
        raw = [
            float(np.exp(rng.normal(cluster_price[k], 0.5))),
            float(rng.beta(2, 30)),
            float(rng.beta(2, 60)),
            float(np.floor(np.exp(rng.normal(4.0, 1.5)))),
            float(np.clip(rng.normal(4.2, 0.5), 1.0, 5.0)),
        ]
        raw += [float(v) for v in rng.normal(size=max(0, config.numeric_dim - len(raw)))]
        items.append(
            CatalogItem(
                item_id=ITEM_ID_BASE + i,
                title=" ".join(words),
                numeric=raw[: config.numeric_dim],
                cluster=k,
                latent=[float(v) for v in latents[i]],
            )
        )
    return SyntheticCatalog(items, c, centroids, pools, shared, names, transforms)


# ---------------------------------------------------------------- sessions


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _generate_users(catalog: SyntheticCatalog, members, config: SessionConfig, rng):
    users = []
    for u in range(config.n_users):
        favourites = rng.choice(catalog.n_clusters, size=min(2, catalog.n_clusters), replace=False)
        n_hist = int(rng.integers(0, 7))
        history = []
        for _ in range(n_hist):
            pool = members[int(favourites[rng.integers(len(favourites))])]
            history.append(catalog.items[int(pool[rng.integers(len(pool))])].item_id)
        numeric = [
            float(np.exp(rng.normal(4.0, 0.9))),
            float(np.floor(np.exp(rng.normal(2.5, 1.0)))),
            float(rng.uniform(0, 2000)),
        ]
        users.append((UserRecord(u, numeric, history), [int(f) for f in favourites]))
    return users


def _text_match(query: str, title: str) -> float:
    q = set(query.split())
    return len(q & set(title.split())) / len(q) if q else 0.0


def _utility_features(catalog, rows, query_cluster, user: UserRecord, history_clusters, query: str = ""):
    """Planted utility inputs for catalog rows; scales are fixed, not data-fitted."""
    it = [catalog.items[int(r)] for r in rows]
    num = np.array([x.numeric for x in it], dtype=np.float64)
    latent = np.array([x.latent for x in it])
    relevance = latent @ catalog.centroids[query_cluster]
    price_fit = -np.abs(np.log(num[:, 0]) - np.log(user.numeric[0]))
    return {
        "relevance": relevance,
        "text_match": np.array([_text_match(query, x.title) for x in it]),
        "ctr": (num[:, 1] - 0.0625) / 0.042,
        "cvr": (num[:, 2] - 0.0323) / 0.022,
        "sale_volume": (np.log1p(num[:, 3]) - 4.2) / 1.4,
        "rating": (num[:, 4] - 4.2) / 0.5,
        "price_fit": price_fit + 0.8,
        "history": np.array([x.cluster in history_clusters for x in it], dtype=np.float64),
    }


def _weighted_parts(catalog, rows, query_cluster, user, history_clusters, weights, query="") -> dict:
    feats = _utility_features(catalog, rows, query_cluster, user, history_clusters, query)
    unknown = set(weights) - set(feats)
    if unknown:
        raise ConfigError(f"unknown utility weights {sorted(unknown)}")
    return {name: float(w) * feats[name] for name, w in weights.items()}


def planted_utility(catalog, rows, query_cluster, user, history_clusters, weights, query="") -> np.ndarray:
    return sum(_weighted_parts(catalog, rows, query_cluster, user, history_clusters, weights, query).values())


def planted_parts(catalog: SyntheticCatalog, session: "SessionLog", weights: dict) -> dict:
    """Weighted utility parts for a logged session's presented items, in presentation order."""
    row = {it.item_id: i for i, it in enumerate(catalog.items)}
    rows = np.array([row[p.item_id] for p in session.presented], dtype=np.int64)
    history_clusters = {catalog.items[row[h]].cluster for h in session.user.history}
    return _weighted_parts(catalog, rows, session.query_cluster, session.user, history_clusters, weights,
                           session.query)


def generate_sessions(
    catalog: SyntheticCatalog, config: SessionConfig, seed: int
) -> tuple[list[SessionLog], list[SessionSidecar]]:
    config.validate(len(catalog))
    rng = np.random.default_rng([seed, 22])
    members = catalog.members()
    all_rows = np.arange(len(catalog))
    outside = [np.setdiff1d(all_rows, mem) for mem in members]
    users = _generate_users(catalog, members, config, rng)
    cluster_of = {it.item_id: it.cluster for it in catalog.items}
    n_test = int(round(config.n_sessions * config.test_frac))
    sessions, sidecars = [], []
    for sid in range(config.n_sessions):
        user, favourites = users[int(rng.integers(len(users)))]
        if rng.random() < 0.5:
            qc = favourites[int(rng.integers(len(favourites)))]
        else:
            qc = int(rng.integers(catalog.n_clusters))
        pool = catalog.pools[qc]
        q_len = min(int(rng.integers(2, 4)), len(pool))
        query = " ".join(pool[i] for i in rng.choice(len(pool), q_len, replace=False))

        m = config.presented_per_session
        n_in = min(int(rng.binomial(m, config.in_cluster_frac)), len(members[qc]))
        n_out = m - n_in
        if n_out > len(outside[qc]):
            n_in += n_out - len(outside[qc])
            n_out = len(outside[qc])
        rows = np.concatenate([
            rng.choice(members[qc], n_in, replace=False),
            rng.choice(outside[qc], n_out, replace=False),
        ]).astype(np.int64)

        history_clusters = {cluster_of[h] for h in user.history}
        parts = _weighted_parts(catalog, rows, qc, user, history_clusters, config.utility_weights, query)
        u = sum(parts.values())
        rel = parts.get("relevance", 0.0) + parts.get("text_match", 0.0)
        click_u = rel + config.click_quality_weight * (u - rel)
        if config.presentation == "utility":
            order = np.lexsort((rows, -u))
        else:
            order = rng.permutation(m)
        rows, u, click_u = rows[order], u[order], np.broadcast_to(click_u, (m,))[order]
        noise = config.noise_scale * rng.normal(size=m)
        positions = np.arange(1, m + 1)
        click_p = _sigmoid(
            config.click_scale * (click_u + noise) + config.click_bias
            - config.position_bias * np.log2(1 + positions)
        )
        order_p = _sigmoid(config.order_scale * (u + noise) + config.order_bias)
        clicked = rng.random(m) < click_p
        ordered = clicked & (rng.random(m) < order_p)
        presented = [
            Presented(catalog.items[int(r)].item_id, int(p), bool(c), bool(o))
            for r, p, c, o in zip(rows, positions, clicked, ordered)
        ]
        split = "test" if sid >= config.n_sessions - n_test else "train"
        sessions.append(SessionLog(sid, query, int(qc), user, presented, split))
        sidecars.append(
            SessionSidecar(
                sid,
                [float(x) for x in u],
                [float(x) for x in click_p],
                [float(x) for x in order_p],
            )
        )
    return sessions, sidecars


def held_out_queries(catalog: SyntheticCatalog, n_queries: int, seed: int) -> list[tuple[str, int]]:
    """Fresh (query text, cluster) pairs for retrieval evaluation."""
    rng = np.random.default_rng([seed, 33])
    out = []
    for _ in range(n_queries):
        qc = int(rng.integers(catalog.n_clusters))
        pool = catalog.pools[qc]
        q_len = min(int(rng.integers(2, 4)), len(pool))
        out.append((" ".join(pool[i] for i in rng.choice(len(pool), q_len, replace=False)), qc))
    return out


# ---------------------------------------------------------------- training examples


@dataclass
class TripletPolicy:
    negatives_per_positive: int = 2
    easy_prob: float = 0.5


@dataclass
class TripletStats:
    emitted: int = 0
    skipped_sessions: int = 0
    hard_fallbacks: int = 0


def make_triplets(
    sessions: Iterable[SessionLog],
    catalog: SyntheticCatalog,
    policy: TripletPolicy | None = None,
    seed: int = 0,
    stats: TripletStats | None = None,
) -> list[TripletRecord]:
    """Clicked items as positives; negatives are easy (other cluster) or hard (skipped impression).

    A hard draw from a session with no unclicked impression falls back to easy.
    """
    policy = policy or TripletPolicy()
    stats = stats if stats is not None else TripletStats()
    rng = np.random.default_rng([seed, 44])
    clusters = np.array([it.cluster for it in catalog.items], dtype=np.int64)
    ids = np.array([it.item_id for it in catalog.items], dtype=np.int64)
    out = []
    for s in sessions:
        positives = [p.item_id for p in s.presented if p.clicked]
        if not positives:
            stats.skipped_sessions += 1
            continue
        unclicked = [p.item_id for p in s.presented if not p.clicked]
        outside = np.flatnonzero(clusters != s.query_cluster)
        for pos in positives:
            for _ in range(policy.negatives_per_positive):
                hard = rng.random() >= policy.easy_prob
                if hard and not unclicked:
                    hard = False
                    stats.hard_fallbacks += 1
                if hard:
                    neg = unclicked[int(rng.integers(len(unclicked)))]
                else:
                    pool = outside if len(outside) else np.flatnonzero(ids != pos)
                    neg = int(ids[pool[int(rng.integers(len(pool)))]])
                if neg == pos:
                    continue
                out.append(TripletRecord(s.session_id, s.query, s.query_cluster, pos, int(neg), hard))
    stats.emitted += len(out)
    return out


def make_pairs(sessions: Iterable[SessionLog], click_pairs: bool = False) -> list[PairRecord]:
    """(ordered, not ordered) pairs with label 1 and their mirrors with label 0.

    Both-ordered and neither-ordered pairs are skipped.  With ``click_pairs``,
    (clicked-not-ordered, unclicked) pairs are added the same way.
    """
    out = []
    for s in sessions:
        groups = [([p for p in s.presented if p.ordered], [p for p in s.presented if not p.ordered])]
        if click_pairs:
            groups.append((
                [p for p in s.presented if p.clicked and not p.ordered],
                [p for p in s.presented if not p.clicked],
            ))
        for better, worse in groups:
            for x in better:
                for y in worse:
                    out.append(PairRecord(s.session_id, s.query, s.user, x.item_id, y.item_id, 1))
                    out.append(PairRecord(s.session_id, s.query, s.user, y.item_id, x.item_id, 0))
    return out


# ---------------------------------------------------------------- featurization


def feature_config(catalog: SyntheticCatalog, buckets: int = 1 << 16) -> FeatureConfig:
    return FeatureConfig(
        query_buckets=buckets,
        item_buckets=buckets,
        action_buckets=buckets,
        item_numeric=list(catalog.numeric_names),
        item_transforms=list(catalog.numeric_transforms),
        user_numeric=list(USER_NUMERIC),
        user_transforms=list(USER_TRANSFORMS),
    )


def fit_stats(catalog: SyntheticCatalog, sessions: Sequence[SessionLog], config: FeatureConfig):
    """Numeric stats over the catalog and the users seen in training sessions."""
    item_raw = np.array([it.numeric for it in catalog.items]).reshape(-1, config.item_numeric_dim)
    users = {}
    for s in sessions:
        if s.split == "train":
            users.setdefault(s.user.user_id, s.user.numeric)
    user_raw = np.array([users[k] for k in sorted(users)]).reshape(-1, config.user_numeric_dim)
    return FeatureStats(
        NumericStats.fit(item_raw, config.item_transforms),
        NumericStats.fit(user_raw, config.user_transforms),
    )


class CatalogFeatures:
    """Catalog featurized once: token store and normalized numeric matrix by row."""

    def __init__(self, catalog: SyntheticCatalog, featurizer: Featurizer):
        self.featurizer = featurizer
        self.item_ids = np.array([it.item_id for it in catalog.items], dtype=np.int64)
        self.row = {int(i): r for r, i in enumerate(self.item_ids)}
        self.titles = [it.title for it in catalog.items]
        self.tokens = TokenStore.from_texts(self.titles, featurizer.config.item_buckets)
        raw = np.array([it.numeric for it in catalog.items]).reshape(
            len(catalog), featurizer.config.item_numeric_dim
        )
        self.numeric = featurizer.stats.item.transform(raw)

    def rows(self, item_ids) -> np.ndarray:
        return np.array([self.row[int(i)] for i in item_ids], dtype=np.int64)

    def item(self, item_id: int) -> ItemFeatures:
        r = self.row[int(item_id)]
        values = self.numeric[r].copy()
        values.flags.writeable = False
        return ItemFeatures(
            int(item_id), self.tokens.row(r), NumericFeatures(values, self.featurizer.stats.item.transforms)
        )

    def user(self, user: UserRecord) -> UserContext:
        titles = [self.titles[self.row[h]] for h in user.history]
        return self.featurizer.user(titles, user.numeric)

    def query(self, text: str) -> QueryFeatures:
        return self.featurizer.query(text)


def _index_texts(texts: Sequence[str]) -> tuple[list[str], np.ndarray]:
    unique: dict[str, int] = {}
    idx = np.array([unique.setdefault(t, len(unique)) for t in texts], dtype=np.int64)
    return list(unique), idx


def triplet_data(records: Sequence[TripletRecord], cf: CatalogFeatures):
    texts, q = _index_texts([r.query for r in records])
    return TripletData(
        TokenStore.from_texts(texts, cf.featurizer.config.query_buckets),
        cf.tokens,
        cf.numeric,
        q,
        cf.rows([r.positive for r in records]),
        cf.rows([r.negative for r in records]),
        cf.item_ids,
    )


def _user_store(users: Sequence[UserRecord], cf: CatalogFeatures):
    contexts = [cf.user(u) for u in users]
    store = TokenStore.from_hashed([c.action_tokens for c in contexts], cf.featurizer.config.action_buckets)
    numeric = np.array([c.numeric.values for c in contexts]).reshape(
        len(users), cf.featurizer.config.user_numeric_dim
    )
    return store, numeric


def pair_data(records: Sequence[PairRecord], cf: CatalogFeatures):
    texts, q = _index_texts([r.query for r in records])
    user_by_id: dict[int, UserRecord] = {}
    for r in records:
        user_by_id.setdefault(r.user.user_id, r.user)
    uids = sorted(user_by_id)
    urow = {u: i for i, u in enumerate(uids)}
    users, user_numeric = _user_store([user_by_id[u] for u in uids], cf)
    return PairData(
        users,
        user_numeric,
        TokenStore.from_texts(texts, cf.featurizer.config.query_buckets),
        cf.tokens,
        cf.numeric,
        np.array([urow[r.user.user_id] for r in records], dtype=np.int64),
        q,
        cf.rows([r.item_a for r in records]),
        cf.rows([r.item_b for r in records]),
        np.array([r.label for r in records], dtype=np.int64),
    )


def triplet_examples(records: Sequence[TripletRecord], cf: CatalogFeatures) -> list[TripletExample]:
    return [TripletExample(cf.query(r.query), cf.item(r.positive), cf.item(r.negative)) for r in records]


def pair_examples(records: Sequence[PairRecord], cf: CatalogFeatures) -> list[PairExample]:
    return [
        PairExample(cf.user(r.user), cf.query(r.query), cf.item(r.item_a), cf.item(r.item_b), r.label)
        for r in records
    ]


# ---------------------------------------------------------------- JSONL files


def _dump(obj) -> str:
    d = asdict(obj)
    d["schema_version"] = SCHEMA_VERSION
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def write_jsonl(path, records: Iterable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(_dump(r))
            fh.write("\n")


def _read(path) -> Iterable[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            if d.pop("schema_version", None) != SCHEMA_VERSION:
                raise ConfigError(f"{path}:{lineno}: unsupported or missing schema_version")
            yield d


def write_catalog(path, catalog: SyntheticCatalog) -> None:
    header = {
        "kind": "catalog_header",
        "schema_version": SCHEMA_VERSION,
        "n_clusters": catalog.n_clusters,
        "centroids": catalog.centroids.tolist(),
        "pools": catalog.pools,
        "shared": catalog.shared,
        "numeric_names": catalog.numeric_names,
        "numeric_transforms": catalog.numeric_transforms,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for it in catalog.items:
            fh.write(_dump(it) + "\n")


def read_catalog(path) -> SyntheticCatalog:
    rows = iter(_read(path))
    header = next(rows, None)
    if header is None or header.get("kind") != "catalog_header":
        raise ConfigError(f"{path}: missing catalog header line")
    items = [CatalogItem(**d) for d in rows]
    return SyntheticCatalog(
        items,
        header["n_clusters"],
        np.array(header["centroids"], dtype=np.float64),
        header["pools"],
        header["shared"],
        header["numeric_names"],
        header["numeric_transforms"],
    )


def _session_from(d: dict) -> SessionLog:
    d["user"] = UserRecord(**d["user"])
    d["presented"] = [Presented(**p) for p in d["presented"]]
    return SessionLog(**d)


def read_sessions(path) -> list[SessionLog]:
    return [_session_from(d) for d in _read(path)]


def read_sidecars(path) -> list[SessionSidecar]:
    return [SessionSidecar(**d) for d in _read(path)]


def read_triplets(path) -> list[TripletRecord]:
    return [TripletRecord(**d) for d in _read(path)]


def read_pairs(path) -> list[PairRecord]:
    out = []
    for d in _read(path):
        d["user"] = UserRecord(**d["user"])
        out.append(PairRecord(**d))
    return out


def write_queries(path, queries: Sequence[tuple[str, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for text, cluster in queries:
            fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "query": text, "cluster": cluster},
                                sort_keys=True, separators=(",", ":")) + "\n")


def read_queries(path) -> list[tuple[str, int]]:
    return [(d["query"], d["cluster"]) for d in _read(path)]

