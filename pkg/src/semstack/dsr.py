"""Two-tower semantic retrieval: query tower, item tower, margin hinge loss, training."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyDatasetError, NonFiniteError
from .features import ItemFeatures, QueryFeatures, TokenStore
from .nn import AdamState, Bag, Tower, adam_step

log = logging.getLogger(__name__)


@dataclass
class DsrTrainConfig:
    margin: float = 0.1
    epochs: int = 5
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    embedding_dim: int = 64
    widths: tuple[int, ...] = (256, 128, 64)
    emb_init_std: float = 0.01

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.widths:
            raise ConfigError("at least one dense layer is required")

    def to_dict(self) -> dict:
        return asdict(self)


def _tower_activations(n_layers: int) -> list[str]:
    # hidden layers encode with ReLU; the projection into embedding space is linear
    return ["relu"] * (n_layers - 1) + ["identity"]


class TwoTowerModel:
    """Query tower Q and item tower S with no shared parameters.

    A model loaded for online serving may carry only the query tower
    (``item_tower is None``).
    """

    def __init__(
        self,
        query_buckets: int,
        item_buckets: int,
        item_numeric_dim: int,
        embedding_dim: int = 64,
        widths: Sequence[int] = (256, 128, 64),
        with_item_tower: bool = True,
    ):
        acts = _tower_activations(len(widths))
        self.query_tower = Tower({"query": (query_buckets, embedding_dim)}, 0, widths, acts, True)
        self.item_tower = (
            Tower({"item": (item_buckets, embedding_dim)}, item_numeric_dim, widths, acts, True)
            if with_item_tower
            else None
        )

    @property
    def dim(self) -> int:
        return self.query_tower.output_dim

    @classmethod
    def initialized(cls, config: DsrTrainConfig, query_buckets, item_buckets, item_numeric_dim):
        model = cls(query_buckets, item_buckets, item_numeric_dim, config.embedding_dim, config.widths)
        rng = np.random.default_rng([config.seed, 0])
        model.query_tower.init(rng, config.emb_init_std)
        model.item_tower.init(rng, config.emb_init_std)
        return model

    def towers(self) -> dict[str, Tower]:
        out = {"query": self.query_tower}
        if self.item_tower is not None:
            out["item"] = self.item_tower
        return out

    def params(self) -> dict[str, np.ndarray]:
        return {
            f"{tname}.{pname}": arr
            for tname, tower in self.towers().items()
            for pname, arr in tower.params().items()
        }

    def embed_queries(self, bag: Bag) -> np.ndarray:
        return self.query_tower.forward({"query": bag})

    def embed_items(self, bag: Bag, numeric: np.ndarray) -> np.ndarray:
        if self.item_tower is None:
            raise ConfigError("this model was loaded without its item tower")
        return self.item_tower.forward({"item": bag}, numeric)


def query_embed(model: TwoTowerModel, q: QueryFeatures) -> np.ndarray:
    return model.embed_queries(Bag.from_lists([q.tokens.ids]))[0]


def item_embed(model: TwoTowerModel, s: ItemFeatures) -> np.ndarray:
    return model.embed_items(Bag.from_lists([s.tokens.ids]), s.numeric.values[None, :])[0]


def triplet_hinge_loss(qv, pv, nv, margin: float):
    """max(0, margin - (q.p - q.n)), row-wise for batched inputs."""
    qv, pv, nv = (np.asarray(a, dtype=np.float64) for a in (qv, pv, nv))
    gap = np.sum(qv * pv, axis=-1) - np.sum(qv * nv, axis=-1)
    return np.maximum(0.0, margin - gap)


def hinge_grads(qv, pv, nv, margin: float):
    """Loss per triple plus its gradients w.r.t. the three embeddings.

    The hinge is taken as inactive at exactly zero, so a triple meeting the
    margin contributes exact zeros.
    """
    gap = np.einsum("ij,ij->i", qv, pv) - np.einsum("ij,ij->i", qv, nv)
    slack = margin - gap
    active = (slack > 0).astype(np.float64)[:, None]
    loss = np.maximum(0.0, slack)
    return loss, active * (nv - pv), -active * qv, active * qv


@dataclass
class TripletData:
    """Triples as index arrays into shared query/item stores."""

    queries: TokenStore
    items: TokenStore
    item_numeric: np.ndarray
    q: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    item_ids: np.ndarray | None = None

    def __len__(self):
        return len(self.q)

    @classmethod
    def from_examples(cls, examples, query_buckets: int, item_buckets: int) -> "TripletData":
        items: dict[int, ItemFeatures] = {}
        queries = []
        for ex in examples:
            queries.append(ex.query.tokens)
            items.setdefault(ex.positive.item_id, ex.positive)
            items.setdefault(ex.negative.item_id, ex.negative)
        ids = sorted(items)
        row = {iid: i for i, iid in enumerate(ids)}
        numeric_dim = len(items[ids[0]].numeric.values) if ids else 0
        return cls(
            TokenStore.from_hashed(queries, query_buckets),
            TokenStore.from_hashed([items[i].tokens for i in ids], item_buckets),
            np.array([items[i].numeric.values for i in ids]).reshape(len(ids), numeric_dim),
            np.arange(len(examples), dtype=np.int64),
            np.array([row[ex.positive.item_id] for ex in examples], dtype=np.int64),
            np.array([row[ex.negative.item_id] for ex in examples], dtype=np.int64),
            np.array(ids, dtype=np.int64),
        )


@dataclass
class DsrTrainResult:
    model: TwoTowerModel
    history: list[float] = field(default_factory=list)


def batch_loss_and_grads(model: TwoTowerModel, data: TripletData, idx: np.ndarray, margin: float):
    """Summed hinge loss over the triples ``idx`` and gradients for every parameter."""
    qv = model.query_tower.forward({"query": data.queries.bag(data.q[idx])}, record=True)
    item_rows = np.concatenate([data.pos[idx], data.neg[idx]])
    iv = model.item_tower.forward(
        {"item": data.items.bag(item_rows)}, data.item_numeric[item_rows], record=True
    )
    b = len(idx)
    pv, nv = iv[:b], iv[b:]
    loss, gq, gp, gn = hinge_grads(qv, pv, nv, margin)
    q_grads, _ = model.query_tower.backward(gq)
    i_grads, _ = model.item_tower.backward(np.concatenate([gp, gn]))
    grads = {f"query.{k}": v for k, v in q_grads.items()}
    grads.update({f"item.{k}": v for k, v in i_grads.items()})
    return float(loss.sum()), grads


def train_dsr(
    data: TripletData,
    config: DsrTrainConfig,
    model: TwoTowerModel | None = None,
) -> DsrTrainResult:
    """Mini-batch Adam on the summed hinge loss; history holds mean loss per triple per epoch."""
    if len(data) == 0:
        raise EmptyDatasetError("train_dsr needs at least one triple")
    if model is None:
        model = TwoTowerModel.initialized(
            config, data.queries.num_buckets, data.items.num_buckets, data.item_numeric.shape[1]
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
            loss, grads = batch_loss_and_grads(model, data, idx, config.margin)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite DSR loss at epoch {epoch} step {step}")
            adam_step(params, grads, state)
            total += loss
        history.append(total / len(data))
        log.info("dsr epoch %d mean hinge loss %.5f", epoch, history[-1])
    return DsrTrainResult(model, history)
