import numpy as np
import pytest

from semstack.dpr import DprTrainConfig, PairData, PairwiseModel
from semstack.dsr import DsrTrainConfig, TripletData, TwoTowerModel
from semstack.features import TokenStore

BUCKETS = 64


def random_store(rng, n, buckets=BUCKETS, max_len=5, min_len=1):
    lists = [rng.integers(0, buckets, rng.integers(min_len, max_len + 1)) for _ in range(n)]
    offsets = np.cumsum([0] + [len(x) for x in lists])
    flat = np.concatenate(lists) if offsets[-1] else np.zeros(0, np.int64)
    return TokenStore(offsets, flat, buckets)


def small_dsr(seed=0, dim=8, widths=(16, 8), numeric_dim=3, emb_std=0.3):
    cfg = DsrTrainConfig(seed=seed, embedding_dim=dim, widths=widths, emb_init_std=emb_std)
    return TwoTowerModel.initialized(cfg, BUCKETS, BUCKETS, numeric_dim)


def small_dpr(seed=0, dim=8, widths=(16, 8, 4), user_dim=2, item_dim=3, emb_std=0.3):
    cfg = DprTrainConfig(seed=seed, embedding_dim=dim, widths=widths, emb_init_std=emb_std)
    return PairwiseModel.initialized(cfg, BUCKETS, BUCKETS, BUCKETS, user_dim, item_dim)


def random_triplets(rng, n=12, n_items=20, n_queries=8, numeric_dim=3):
    return TripletData(
        random_store(rng, n_queries), random_store(rng, n_items), rng.normal(size=(n_items, numeric_dim)),
        rng.integers(0, n_queries, n), rng.integers(0, n_items, n), rng.integers(0, n_items, n),
    )


def random_pairs(rng, n=12, n_items=20, n_queries=8, n_users=5, user_dim=2, item_dim=3):
    a = rng.integers(0, n_items, n)
    b = (a + rng.integers(1, n_items, n)) % n_items
    return PairData(
        random_store(rng, n_users, min_len=0), rng.normal(size=(n_users, user_dim)),
        random_store(rng, n_queries), random_store(rng, n_items), rng.normal(size=(n_items, item_dim)),
        rng.integers(0, n_users, n), rng.integers(0, n_queries, n), a, b, rng.integers(0, 2, n),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[str, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA.setdefault(marker.args[0], []).append((item.name, report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: int(s[1:])):
        runs = _CRITERIA[name]
        ok = all(outcome == "passed" for _, outcome, _ in runs)
        details = " | ".join(d for _, _, d in runs if d)
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}  {details}")
