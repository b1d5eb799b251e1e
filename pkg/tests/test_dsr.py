import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import BUCKETS, random_triplets, small_dsr
from semstack.dsr import (
    DsrTrainConfig,
    batch_loss_and_grads,
    hinge_grads,
    item_embed,
    query_embed,
    train_dsr,
    triplet_hinge_loss,
)
from semstack.errors import ConfigError, EmptyDatasetError
from semstack.features import HashedFeatures, ItemFeatures, NumericFeatures, QueryFeatures
from semstack.nn import SparseRows, grad_check


def _unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _query(ids):
    return QueryFeatures(HashedFeatures(np.asarray(ids, dtype=np.int64), BUCKETS))


def _item(iid, ids, numeric):
    return ItemFeatures(iid, HashedFeatures(np.asarray(ids, dtype=np.int64), BUCKETS),
                        NumericFeatures(np.asarray(numeric, dtype=np.float64), ("zscore",) * 3))


def test_hinge_scalar_example():
    # q.p = 0.8, q.n = 0.75 with unit vectors in the plane
    q = np.array([1.0, 0.0])
    p = np.array([0.8, 0.6])
    n = np.array([0.75, np.sqrt(1 - 0.75**2)])
    assert triplet_hinge_loss(q, p, n, 0.1) == pytest.approx(0.05, abs=1e-15)


def test_hinge_zero_region_and_equal_items():
    q = np.array([1.0, 0.0])
    assert triplet_hinge_loss(q, q, -q, 0.1) == 0.0
    p = np.array([0.6, 0.8])
    assert triplet_hinge_loss(q, p, p, 0.3) == 0.3


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.floats(0, 2))
def test_hinge_monotone_in_similarities(seed, margin):
    rng = np.random.default_rng(seed)
    q, p, n = _unit(rng, 3, 6)
    base = triplet_hinge_loss(q, p, n, margin)
    closer_p = p + 0.1 * q
    closer_n = n + 0.1 * q
    assert triplet_hinge_loss(q, closer_p, n, margin) <= base
    assert triplet_hinge_loss(q, p, closer_n, margin) >= base


def test_hinge_grads_zero_when_margin_met():
    rng = np.random.default_rng(0)
    q = _unit(rng, 50, 5)
    loss, gq, gp, gn = hinge_grads(q, q, -q, 0.1)
    assert not loss.any() and not gq.any() and not gp.any() and not gn.any()


def test_config_rejects_negative_margin():
    with pytest.raises(ConfigError):
        DsrTrainConfig(margin=-0.1)


def test_towers_normalized_and_pure(rng):
    model = small_dsr()
    for ids in ([1, 2, 3], [], [5, 5]):
        v = query_embed(model, _query(ids))
        assert abs(np.linalg.norm(v) - 1) < 1e-6
        assert np.array_equal(v, query_embed(model, _query(ids)))
    it = _item(9, [4, 7], [0.1, -1.0, 2.0])
    v = item_embed(model, it)
    assert abs(np.linalg.norm(v) - 1) < 1e-6
    assert np.array_equal(v, item_embed(model, it))
    assert model.dim == 8


def test_towers_share_no_parameters():
    model = small_dsr()
    q = {id(a) for a in model.query_tower.params().values()}
    i = {id(a) for a in model.item_tower.params().values()}
    assert not q & i


def test_query_embedding_independent_of_batch(rng):
    model = small_dsr()
    from semstack.nn import Bag

    lists = [rng.integers(0, BUCKETS, 3) for _ in range(40)]
    batch = model.embed_queries(Bag.from_lists(lists))
    for i in (0, 13, 39):
        assert np.array_equal(batch[i], query_embed(model, _query(lists[i])))


def test_out_of_range_id():
    with pytest.raises(IndexError):
        query_embed(small_dsr(), _query([BUCKETS]))


def test_gradients_match_finite_differences(rng):
    model = small_dsr(seed=3)
    data = random_triplets(rng)
    idx = np.arange(len(data))
    margin = 0.5

    def loss():
        qv = model.embed_queries(data.queries.bag(data.q))
        pv = model.embed_items(data.items.bag(data.pos), data.item_numeric[data.pos])
        nv = model.embed_items(data.items.bag(data.neg), data.item_numeric[data.neg])
        return float(triplet_hinge_loss(qv, pv, nv, margin).sum())

    value, grads = batch_loss_and_grads(model, data, idx, margin)
    assert value == pytest.approx(loss(), abs=1e-12)
    assert grad_check(model.params(), loss, grads) < 1e-4


def test_margin_met_gives_exact_zero_gradients(rng):
    model = small_dsr()
    data = random_triplets(rng)
    data.neg = data.pos.copy()
    _, grads = batch_loss_and_grads(model, data, np.arange(len(data)), 0.0)
    for g in grads.values():
        vals = g.values if isinstance(g, SparseRows) else g
        assert not np.any(vals)


def test_single_triple_overfits(rng):
    data = random_triplets(rng, n=1)
    cfg = DsrTrainConfig(margin=1.0, epochs=100, batch_size=1, lr=0.05, embedding_dim=8, widths=(16, 8))
    model = small_dsr()
    initial = batch_loss_and_grads(model, data, np.arange(1), cfg.margin)[0]
    assert initial > 0
    result = train_dsr(data, cfg, model)
    assert result.history[-1] < initial
    assert len(result.history) == 100


def test_larger_margin_larger_initial_loss(rng):
    model = small_dsr(emb_std=0.01)
    data = random_triplets(rng, n=200)
    idx = np.arange(len(data))
    low = batch_loss_and_grads(model, data, idx, 0.0)[0]
    high = batch_loss_and_grads(model, data, idx, 0.5)[0]
    assert low < high


def test_training_deterministic(rng):
    data = random_triplets(rng, n=64)
    cfg = DsrTrainConfig(epochs=2, batch_size=16, embedding_dim=8, widths=(16, 8), seed=5)
    a = train_dsr(data, cfg)
    b = train_dsr(data, cfg)
    assert a.history == b.history
    for x, y in zip(a.model.params().values(), b.model.params().values()):
        assert np.array_equal(x, y)


def test_empty_dataset(rng):
    data = random_triplets(rng, n=0)
    with pytest.raises(EmptyDatasetError):
        train_dsr(data, DsrTrainConfig(embedding_dim=8, widths=(16, 8)))
