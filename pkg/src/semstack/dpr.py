"""Siamese pairwise re-ranker.

One tower maps (user, query, item) features to a logit.  Training feeds both
items of a pair through that same tower and applies binary cross-entropy to
the logit difference; serving scores each candidate once and sorts.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyDatasetError, NonFiniteError, ShapeError
from .features import ItemFeatures, QueryFeatures, TokenStore, UserContext
from .nn import AdamState, Bag, Tower, adam_step

log = logging.getLogger(__name__)

K_RERANK = 100


@dataclass
class DprTrainConfig:
    epochs: int = 1  # ~2M pairs per epoch; a second epoch overfits
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    embedding_dim: int = 32
    widths: tuple[int, ...] = (256, 64, 16)
    emb_init_std: float = 0.01

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3:
            raise ConfigError("the ranking tower has exactly 3 ReLU layers")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class PairwiseModel:
    """The single shared tower; "both" Siamese branches are this one object."""

    def __init__(
        self,
        query_buckets: int,
        item_buckets: int,
        action_buckets: int,
        user_numeric_dim: int,
        item_numeric_dim: int,
        embedding_dim: int = 32,
        widths: Sequence[int] = (256, 64, 16),
    ):
        if len(widths) != 3:
            raise ConfigError("the ranking tower has exactly 3 ReLU layers")
        e = embedding_dim
        self.user_numeric_dim = int(user_numeric_dim)
        self.item_numeric_dim = int(item_numeric_dim)
        self.tower = Tower(
            {"query": (query_buckets, e), "item": (item_buckets, e), "user": (action_buckets, e)},
            self.user_numeric_dim + self.item_numeric_dim,
            list(widths) + [1],
            ["relu", "relu", "relu", "identity"],
            normalize=False,
        )

    @classmethod
    def initialized(cls, config: DprTrainConfig, query_buckets, item_buckets, action_buckets,
                    user_numeric_dim, item_numeric_dim):
        model = cls(query_buckets, item_buckets, action_buckets, user_numeric_dim,
                    item_numeric_dim, config.embedding_dim, config.widths)
        model.tower.init(np.random.default_rng([config.seed, 0]), config.emb_init_std)
        return model

    def params(self) -> dict[str, np.ndarray]:
        return self.tower.params()

    def logits(self, user_bag: Bag, query_bag: Bag, item_bag: Bag, numeric, record=False):
        out = self.tower.forward(
            {"query": query_bag, "item": item_bag, "user": user_bag}, numeric, record=record
        )
        return out[:, 0]


def tower_logits(model: PairwiseModel, user: UserContext, query: QueryFeatures,
                 items: Sequence[ItemFeatures]) -> np.ndarray:
    """One tower evaluation per item, all sharing the same user and query."""
    n = len(items)
    if n == 0:
        return np.zeros(0)
    numeric = np.hstack([
        np.broadcast_to(user.numeric.values, (n, model.user_numeric_dim)),
        np.array([it.numeric.values for it in items]).reshape(n, model.item_numeric_dim),
    ])
    return model.logits(
        Bag.from_lists([user.action_tokens.ids] * n),
        Bag.from_lists([query.tokens.ids] * n),
        Bag.from_lists([it.tokens.ids for it in items]),
        numeric,
    )


def tower_logit(model: PairwiseModel, user: UserContext, query: QueryFeatures,
                item: ItemFeatures) -> float:
    return float(tower_logits(model, user, query, [item])[0])


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def pairwise_loss(logit_a, logit_b, label):
    """Cross-entropy of sigmoid(logit_a - logit_b) against ``label``.

    Evaluated as softplus(-delta) for label 1 and softplus(delta) for label 0,
    which cannot overflow.
    """
    delta = np.asarray(logit_a, dtype=np.float64) - np.asarray(logit_b, dtype=np.float64)
    label = np.asarray(label)
    out = _softplus(np.where(label == 1, -delta, delta))
    return float(out) if out.ndim == 0 else out


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class PairData:
    """Pairs as index arrays into user/query/item stores."""

    users: TokenStore
    user_numeric: np.ndarray
    queries: TokenStore
    items: TokenStore
    item_numeric: np.ndarray
    user: np.ndarray
    query: np.ndarray
    a: np.ndarray
    b: np.ndarray
    label: np.ndarray

    def __len__(self):
        return len(self.label)

    def take(self, idx) -> "PairData":
        return PairData(self.users, self.user_numeric, self.queries, self.items,
                        self.item_numeric, self.user[idx], self.query[idx], self.a[idx],
                        self.b[idx], self.label[idx])

    def branch_inputs(self, idx: np.ndarray):
        """Inputs for the 2B tower rows: items a first, then items b."""
        users = np.concatenate([self.user[idx], self.user[idx]])
        queries = np.concatenate([self.query[idx], self.query[idx]])
        items = np.concatenate([self.a[idx], self.b[idx]])
        numeric = np.hstack([self.user_numeric[users], self.item_numeric[items]])
        return self.users.bag(users), self.queries.bag(queries), self.items.bag(items), numeric


def batch_loss_and_grads(model: PairwiseModel, data: PairData, idx: np.ndarray):
    """Mean pairwise loss over ``idx``; both branches' gradients land in the one tower."""
    ub, qb, ib, numeric = data.branch_inputs(idx)
    logits = model.logits(ub, qb, ib, numeric, record=True)
    b = len(idx)
    delta = logits[:b] - logits[b:]
    y = data.label[idx].astype(np.float64)
    loss = pairwise_loss(logits[:b], logits[b:], data.label[idx])
    g_delta = (_sigmoid(delta) - y) / b
    grads, _ = model.tower.backward(np.concatenate([g_delta, -g_delta])[:, None])
    return float(np.mean(loss)), grads


@dataclass
class DprTrainResult:
    model: PairwiseModel
    history: list[float] = field(default_factory=list)


def train_dpr(data: PairData, config: DprTrainConfig, model: PairwiseModel | None = None,
              ) -> DprTrainResult:
    if len(data) == 0:
        raise EmptyDatasetError("train_dpr needs at least one pair")
    if model is None:
        model = PairwiseModel.initialized(
            config, data.queries.num_buckets, data.items.num_buckets, data.users.num_buckets,
            data.user_numeric.shape[1], data.item_numeric.shape[1],
        )
    params = model.params()
    state = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng([config.seed, 1])
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss, grads = batch_loss_and_grads(model, data, idx)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite DPR loss at epoch {epoch} step {step}")
            adam_step(params, grads, state)
            total += loss * len(idx)
        history.append(total / len(data))
        log.info("dpr epoch %d mean pairwise loss %.5f", epoch, history[-1])
    return DprTrainResult(model, history)


@dataclass
class RerankRequest:
    user: UserContext
    query: QueryFeatures
    items: list[ItemFeatures]


@dataclass
class RerankResult:
    ranked: list[tuple[int, float]]


def order_by_score(item_ids, scores) -> list[tuple[int, float]]:
    """Descending score, ties by ascending item id."""
    item_ids = np.asarray(item_ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((item_ids, -scores))
    return [(int(item_ids[i]), float(scores[i])) for i in order]


def rerank(model: PairwiseModel, request: RerankRequest, k_rerank: int = K_RERANK) -> RerankResult:
    if len(request.items) > k_rerank:
        raise ShapeError(f"rerank takes at most {k_rerank} items, got {len(request.items)}")
    if not request.items:
        return RerankResult([])
    ids = [it.item_id for it in request.items]
    if len(set(ids)) != len(ids):
        raise ShapeError("rerank request contains duplicate item ids")
    scores = tower_logits(model, request.user, request.query, request.items)
    return RerankResult(order_by_score(ids, scores))
