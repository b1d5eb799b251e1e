import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semstack.crc64 import crc64
from semstack.errors import ChecksumError, ConfigError, FormatError, MagicError, ShapeError, UnsupportedVersionError
from semstack.eval import clustered_unit_vectors, random_unit_vectors
from semstack.index import (
    brute_force_search,
    build_exact,
    build_ivf,
    default_ivf_clusters,
    from_bytes,
    load_index,
    save_index,
    search,
    to_bytes,
)


def _ids(n, base=10):
    return np.arange(base, base + n, dtype=np.uint64)


@pytest.fixture(scope="module")
def corpus():
    vecs = random_unit_vectors(10_000, 32, seed=1)
    return _ids(10_000), vecs


def test_crc64_xz_check_value():
    # standard check value of the CRC-64/XZ catalogue entry
    assert crc64(b"123456789") == 0x995DC9BBDF1939FA
    assert crc64(b"") == 0


def test_search_example():
    idx = build_exact([1, 2, 3], [[1, 0], [0, 1], [0.6, 0.8]])
    res = search(idx, [1.0, 0.0], 2)
    assert [i for i, _ in res.pairs()] == [1, 3]
    assert [s for _, s in res.pairs()] == pytest.approx([1.0, 0.6], abs=1e-7)


def test_empty_index():
    idx = build_exact([], np.zeros((0, 4)), dim=4)
    assert len(idx) == 0
    assert search(idx, [1.0, 0, 0, 0], 5).pairs() == []
    assert len(from_bytes(to_bytes(idx))) == 0


def test_k_above_n_returns_all_sorted():
    vecs = random_unit_vectors(7, 5, seed=2)
    idx = build_exact(_ids(7), vecs)
    q = vecs[3].astype(np.float64) / np.linalg.norm(vecs[3])
    res = search(idx, q, 100)
    assert len(res) == 7 and np.all(np.diff(res.scores) <= 0)


def test_ties_broken_by_ascending_id():
    v = [[1.0, 0.0]] * 4
    idx = build_exact([40, 10, 30, 20], v)
    assert search(idx, [1.0, 0.0], 3).ids.tolist() == [10, 20, 30]


@pytest.mark.parametrize("ids,vecs,err", [
    ([1, 1], [[1, 0], [0, 1]], ConfigError),
    ([1, 2], [[1, 0]], ShapeError),
    ([1], [[0.5, 0.0]], ShapeError),
])
def test_build_rejects_bad_input(ids, vecs, err):
    with pytest.raises(err):
        build_exact(ids, vecs)


def test_search_rejects_bad_query():
    idx = build_exact([1, 2], [[1, 0], [0, 1]])
    with pytest.raises(ShapeError):
        search(idx, [1.0, 0.0, 0.0], 1)
    with pytest.raises(ShapeError):
        search(idx, [0.5, 0.0], 1)
    with pytest.raises(ConfigError):
        search(idx, [1.0, 0.0], 0)


def test_exact_matches_brute_force_oracle(corpus):
    ids, vecs = corpus
    idx = build_exact(ids, vecs)
    queries = random_unit_vectors(100, 32, seed=7, dtype=np.float64)
    for q in queries:
        a, b = search(idx, q, 10), brute_force_search(idx, q, 10)
        assert np.array_equal(a.ids, b.ids)
        assert np.allclose(a.scores, b.scores, rtol=0, atol=1e-6)
        assert len(set(a.ids.tolist())) == len(a)


def test_ivf_full_probe_equals_exact(corpus):
    ids, vecs = corpus
    exact = build_exact(ids, vecs)
    ivf = build_ivf(ids, vecs, n_clusters=50, seed=3)
    for q in random_unit_vectors(50, 32, seed=8, dtype=np.float64):
        a, b = search(ivf, q, 10, nprobe=50), search(exact, q, 10)
        assert np.array_equal(a.ids, b.ids)
        assert np.allclose(a.scores, b.scores, rtol=0, atol=1e-6)


def test_ivf_single_cell_equals_exact():
    vecs = random_unit_vectors(500, 8, seed=4)
    exact, ivf = build_exact(_ids(500), vecs), build_ivf(_ids(500), vecs, n_clusters=1)
    for q in random_unit_vectors(20, 8, seed=5, dtype=np.float64):
        assert search(ivf, q, 10, nprobe=1).pairs() == search(exact, q, 10).pairs()


def test_ivf_partition_invariants():
    vecs = random_unit_vectors(200, 8, seed=6)
    one_each = build_ivf(_ids(200), vecs, n_clusters=200, kmeans_iters=5)
    assert all(len(p) == 1 for p in one_each.postings)
    ivf = build_ivf(_ids(200), vecs, n_clusters=13)
    members = np.sort(np.concatenate(ivf.postings))
    assert np.array_equal(members, np.arange(200))
    with pytest.raises(ConfigError):
        build_ivf(_ids(200), vecs, n_clusters=201)
    with pytest.raises(ConfigError):
        search(ivf, vecs[0].astype(np.float64) / np.linalg.norm(vecs[0]), 5, nprobe=14)


def test_ivf_recovers_planted_blobs():
    rng = np.random.default_rng(9)
    a = np.array([1.0, 0.0, 0.0]) + 0.05 * rng.normal(size=(60, 3))
    b = np.array([0.0, 0.0, 1.0]) + 0.05 * rng.normal(size=(40, 3))
    vecs = np.vstack([a, b])
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    ivf = build_ivf(_ids(100), vecs, n_clusters=2, seed=1)
    cells = sorted(sorted(p.tolist()) for p in ivf.postings)
    assert cells == [list(range(60)), list(range(60, 100))]


def test_recall_monotone_in_nprobe():
    vecs = clustered_unit_vectors(5000, 16, n_blobs=40, spread=0.5, seed=2)
    ids = _ids(5000)
    exact, ivf = build_exact(ids, vecs), build_ivf(ids, vecs, n_clusters=default_ivf_clusters(5000))
    queries = random_unit_vectors(50, 16, seed=3, dtype=np.float64)
    truth = [set(search(exact, q, 10).ids.tolist()) for q in queries]
    recalls = []
    for nprobe in (1, 2, 4, 8, 16, 32, ivf.n_clusters):
        hits = sum(len(t & set(search(ivf, q, 10, nprobe).ids.tolist())) for q, t in zip(queries, truth))
        recalls.append(hits / (10 * len(queries)))
    assert all(x <= y for x, y in zip(recalls, recalls[1:]))
    assert recalls[-1] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_search_result_contract(n, k, seed):
    vecs = random_unit_vectors(n, 6, seed=seed)
    idx = build_ivf(_ids(n), vecs, n_clusters=max(1, n // 5), kmeans_iters=3, seed=seed)
    q = random_unit_vectors(1, 6, seed=seed + 1, dtype=np.float64)[0]
    res = search(idx, q, k, nprobe=idx.n_clusters)
    assert len(res) == min(k, n)
    assert len(set(res.ids.tolist())) == len(res)
    assert np.all(np.abs(res.scores) <= 1 + 1e-3)
    keys = list(zip(-res.scores, res.ids))
    assert keys == sorted(keys)


# ---------------------------------------------------------------- persistence


@pytest.mark.parametrize("variant", ["exact", "ivf"])
def test_roundtrip_byte_exact(tmp_path, variant):
    vecs = random_unit_vectors(300, 8, seed=1)
    idx = build_exact(_ids(300), vecs) if variant == "exact" else build_ivf(_ids(300), vecs, n_clusters=17)
    save_index(idx, tmp_path / "a.eidx")
    back = load_index(tmp_path / "a.eidx")
    save_index(back, tmp_path / "b.eidx")
    assert (tmp_path / "a.eidx").read_bytes() == (tmp_path / "b.eidx").read_bytes()
    assert np.array_equal(back.vectors, idx.vectors) and np.array_equal(back.item_ids, idx.item_ids)
    q = vecs[0].astype(np.float64) / np.linalg.norm(vecs[0])
    assert search(back, q, 5).pairs() == search(idx, q, 5).pairs()


def test_build_is_deterministic():
    vecs = random_unit_vectors(400, 8, seed=3)
    assert to_bytes(build_ivf(_ids(400), vecs, 20, seed=4)) == to_bytes(build_ivf(_ids(400), vecs, 20, seed=4))
    assert to_bytes(build_exact(_ids(400), vecs)) == to_bytes(build_exact(_ids(400), vecs))


def test_header_layout():
    data = to_bytes(build_exact([7], [[0.0, 1.0]]))
    assert data[:4] == b"EIDX"
    assert struct.unpack_from("<IBIQ", data, 4) == (1, 0, 2, 1)
    assert struct.unpack_from("<Q", data, 21)[0] == 7
    assert struct.unpack_from("<2f", data, 29) == (0.0, 1.0)
    assert struct.unpack("<Q", data[-8:])[0] == crc64(data[:-8])


def test_load_errors():
    data = to_bytes(build_ivf(_ids(50), random_unit_vectors(50, 4, seed=0), n_clusters=5))
    with pytest.raises(ChecksumError):
        from_bytes(data[:-3])
    with pytest.raises(ChecksumError):
        from_bytes(data[:30])
    with pytest.raises(MagicError):
        from_bytes(b"XIDX" + data[4:])
    with pytest.raises(UnsupportedVersionError):
        from_bytes(data[:4] + struct.pack("<I", 2) + data[8:])
    flipped = bytearray(data)
    flipped[100] ^= 0x01
    with pytest.raises(ChecksumError) as err:
        from_bytes(bytes(flipped))
    assert err.value.offset == len(data) - 8
    assert isinstance(err.value, FormatError)
