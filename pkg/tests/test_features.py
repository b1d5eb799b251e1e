import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semstack.errors import ConfigError, ShapeError
from semstack.features import (
    BIGRAM_JOINER,
    FeatureConfig,
    FeatureStats,
    Featurizer,
    NumericStats,
    TokenStore,
    action_tokens,
    fnv1a64,
    hash_text,
    ngram_count,
    normalize_numeric,
    tokenize,
)

# FNV-1a 64 reference vectors (Fowler/Noll/Vo test suite)
FNV_VECTORS = {"": 0xCBF29CE484222325, "a": 0xAF63DC4C8601EC8C, "foobar": 0x85944171F73967E8}
# computed with an independent numpy uint64 implementation, then frozen
RED_1024 = 540


def test_tokenize_examples():
    t = tokenize("red running shoe")
    assert t.unigrams == ("red", "running", "shoe")
    assert t.bigrams == ("red▁running", "running▁shoe")
    assert tokenize("").unigrams == () and tokenize("").bigrams == ()
    s = tokenize("Shoe")
    assert s.unigrams == ("shoe",) and s.bigrams == ()


@given(st.text())
def test_tokenize_invariants(text):
    t = tokenize(text)
    assert len(t.bigrams) == max(0, len(t.unigrams) - 1)
    for i, b in enumerate(t.bigrams):
        assert b == t.unigrams[i] + BIGRAM_JOINER + t.unigrams[i + 1]


@pytest.mark.parametrize("token,expected", sorted(FNV_VECTORS.items()))
def test_fnv_reference_vectors(token, expected):
    assert fnv1a64(token) == expected


def test_hash_red_frozen():
    assert hash_text("red", 1024).ids.tolist() == [RED_1024]


def test_hash_duplicates_and_order():
    h = hash_text("a a", 64)
    a = fnv1a64("a") % 64
    assert h.ids.tolist() == [a, a, fnv1a64("a" + BIGRAM_JOINER + "a") % 64]


@pytest.mark.parametrize("bad", [0, 1, 3, 1000, -8, 2.0])
def test_hash_rejects_bad_buckets(bad):
    with pytest.raises(ConfigError):
        hash_text("red", bad)


@given(st.text(), st.integers(1, 20))
def test_hash_properties(text, log2):
    n = 1 << log2
    a, b = hash_text(text, n), hash_text(text, n)
    assert np.array_equal(a.ids, b.ids)
    assert np.all((a.ids >= 0) & (a.ids < n))
    assert len(a.ids) == ngram_count(len(tokenize(text).unigrams))
    assert not a.ids.flags.writeable


def test_normalize_examples():
    stats = NumericStats(("zscore", "zscore", "zscore"), np.array([3.0, 1.0, 7.0]), np.array([2.0, 1.0, 0.0]))
    out = normalize_numeric([5.0, 1.0, 123.0], stats)
    assert out.values.tolist() == [1.0, 0.0, 0.0]
    assert normalize_numeric(stats.mean, stats).values[:2].tolist() == [0.0, 0.0]
    with pytest.raises(ShapeError):
        normalize_numeric([1.0, 2.0], stats)


def test_log1p_applied_before_zscore():
    raw = np.array([[0.0], [np.e - 1]])
    stats = NumericStats.fit(raw, ["log1p_zscore"])
    assert stats.mean[0] == pytest.approx(0.5)
    assert stats.std[0] == pytest.approx(0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2**32 - 1))
def test_training_split_is_standardized(n, seed):
    rng = np.random.default_rng(seed)
    raw = np.column_stack([rng.normal(5, 3, n), np.exp(rng.normal(2, 1, n)), np.full(n, 4.0)])
    stats = NumericStats.fit(raw, ["zscore", "log1p_zscore", "zscore"])
    z = stats.transform(raw)
    assert np.all(np.isfinite(z))
    for j in (0, 1):
        if not stats.constant[j]:
            assert abs(z[:, j].mean()) < 1e-9
            assert abs(z[:, j].std() - 1) < 1e-9
    assert np.all(z[:, 2] == 0.0)


def _config():
    return FeatureConfig(query_buckets=64, item_buckets=128, action_buckets=32,
                         item_numeric=["p", "v"], item_transforms=["zscore", "log1p_zscore"],
                         user_numeric=["u"], user_transforms=["zscore"])


def test_config_and_stats_roundtrip(tmp_path):
    cfg = _config()
    cfg.save(tmp_path / "f.json")
    assert FeatureConfig.load(tmp_path / "f.json") == cfg
    stats = FeatureStats(NumericStats.fit([[1.0, 2.0], [3.0, 5.0]], cfg.item_transforms),
                         NumericStats.fit([[1.0], [2.0]], cfg.user_transforms))
    stats.save(tmp_path / "s.json")
    back = FeatureStats.load(tmp_path / "s.json")
    assert np.array_equal(back.item.mean, stats.item.mean)
    assert np.array_equal(back.user.std, stats.user.std)
    assert json.loads((tmp_path / "s.json").read_text())["schema_version"] == stats.schema_version


def test_config_rejects_wrong_schema_version():
    d = json.loads(_config().to_json())
    d["schema_version"] = 99
    with pytest.raises(ConfigError):
        FeatureConfig.from_json(json.dumps(d))


def test_featurizer_and_cold_inputs():
    cfg = _config()
    stats = FeatureStats(NumericStats.fit([[1.0, 2.0], [3.0, 5.0]], cfg.item_transforms),
                         NumericStats.fit([[1.0], [2.0]], cfg.user_transforms))
    fz = Featurizer(cfg, stats)
    item = fz.item(7, "", [2.0, 3.0])
    assert item.tokens.ids.size == 0 and item.tokens.num_buckets == 128
    user = fz.user([], [1.5])
    assert user.action_tokens.ids.size == 0
    assert user.numeric.values.tolist() == [0.0]
    assert fz.query("red shoe").tokens.num_buckets == 64


def test_action_tokens_hash_titles_separately():
    ids = action_tokens(["red shoe", "blue hat"], 1024).ids.tolist()
    joined = hash_text("red shoe", 1024).ids.tolist() + hash_text("blue hat", 1024).ids.tolist()
    assert ids == joined
    assert len(ids) == 6


def test_token_store_matches_rows():
    texts = ["red shoe", "", "blue running hat"]
    store = TokenStore.from_texts(texts, 256)
    for i, t in enumerate(texts):
        assert np.array_equal(store.row(i).ids, hash_text(t, 256).ids)
    bag = store.bag(np.array([2, 1, 0]))
    assert bag.n == 3
    assert np.array_equal(bag.ids, np.concatenate([hash_text(t, 256).ids for t in texts[::-1]]))
