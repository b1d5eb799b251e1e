import json
import struct

import numpy as np
import pytest

from conftest import BUCKETS, random_store, small_dpr, small_dsr
from semstack.checkpoint import (
    DPR_MAGIC,
    DSR_MAGIC,
    from_bytes,
    load_checkpoint,
    load_dpr,
    load_dsr,
    save_checkpoint,
    to_bytes,
)
from semstack.errors import ChecksumError, ConfigError, MagicError, UnsupportedVersionError


def _queries(rng, n=100):
    return random_store(rng, n).bag(np.arange(n))


def test_dsr_roundtrip_outputs_and_bytes(tmp_path, rng):
    model = small_dsr(seed=1)
    bag = _queries(rng)
    before = model.embed_queries(bag)
    save_checkpoint(model, tmp_path / "a.dsrm")
    back = load_dsr(tmp_path / "a.dsrm")
    after = back.embed_queries(bag)
    assert np.max(np.abs(after - before)) < 1e-6
    assert np.all(np.abs(np.linalg.norm(after, axis=1) - 1) < 1e-3)
    save_checkpoint(back, tmp_path / "b.dsrm")
    assert (tmp_path / "a.dsrm").read_bytes() == (tmp_path / "b.dsrm").read_bytes()


def test_dsr_query_only(tmp_path, rng):
    model = small_dsr(seed=2)
    save_checkpoint(model, tmp_path / "q.dsrm", query_only=True)
    back = load_dsr(tmp_path / "q.dsrm")
    assert back.item_tower is None
    bag = _queries(rng, 10)
    assert np.max(np.abs(back.embed_queries(bag) - model.embed_queries(bag))) < 1e-6
    assert len(to_bytes(model, query_only=True)) < len(to_bytes(model))
    with pytest.raises(ConfigError):
        to_bytes(small_dpr(), query_only=True)


def test_dpr_roundtrip(tmp_path, rng):
    model = small_dpr(seed=3)
    n = 30
    users, queries, items = (random_store(rng, n).bag(np.arange(n)) for _ in range(3))
    numeric = rng.normal(size=(n, 5))
    before = model.logits(users, queries, items, numeric)
    save_checkpoint(model, tmp_path / "m.dprm")
    back = load_dpr(tmp_path / "m.dprm")
    assert np.max(np.abs(back.logits(users, queries, items, numeric) - before)) < 1e-5
    assert to_bytes(back) == (tmp_path / "m.dprm").read_bytes()


def test_magic_mismatch_between_loaders(tmp_path):
    save_checkpoint(small_dsr(), tmp_path / "x.dsrm")
    save_checkpoint(small_dpr(), tmp_path / "x.dprm")
    with pytest.raises(MagicError):
        load_dpr(tmp_path / "x.dsrm")
    with pytest.raises(MagicError):
        load_dsr(tmp_path / "x.dprm")
    assert type(load_checkpoint(tmp_path / "x.dprm")).__name__ == "PairwiseModel"


def test_corruption_and_version():
    data = to_bytes(small_dsr())
    assert data[:4] == DSR_MAGIC and to_bytes(small_dpr())[:4] == DPR_MAGIC
    for pos in (12, len(data) // 2, len(data) - 9):
        bad = bytearray(data)
        bad[pos] ^= 0x10
        with pytest.raises(ChecksumError):
            from_bytes(bytes(bad))
    with pytest.raises(ChecksumError):
        from_bytes(data[:-1])
    with pytest.raises(UnsupportedVersionError):
        from_bytes(data[:4] + struct.pack("<I", 7) + data[8:])
    with pytest.raises(MagicError):
        from_bytes(b"NOPE" + data[4:])


def test_descriptor_is_sorted_json_with_buckets():
    data = to_bytes(small_dsr())
    (dlen,) = struct.unpack_from("<I", data, 8)
    desc = json.loads(data[12 : 12 + dlen])
    assert desc["kind"] == "dsr"
    assert set(desc["towers"]) == {"query", "item"}
    assert json.dumps(desc, sort_keys=True, separators=(",", ":")).encode() == data[12 : 12 + dlen]
    assert str(BUCKETS) in data[12 : 12 + dlen].decode()


def test_same_seed_bit_identical():
    assert to_bytes(small_dsr(seed=4)) == to_bytes(small_dsr(seed=4))
    assert to_bytes(small_dpr(seed=4)) == to_bytes(small_dpr(seed=4))
    assert to_bytes(small_dsr(seed=4)) != to_bytes(small_dsr(seed=5))
