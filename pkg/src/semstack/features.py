"""Text and numeric featurization shared by the retrieval and ranking models.

Text is lowercased, whitespace split into unigrams, and extended with adjacent
bigrams.  Tokens are hashed with FNV-1a 64 into a fixed number of buckets per
field, so no vocabulary has to be built or shipped.  Numeric attributes are
z-scored with statistics fitted on the training split, optionally after log1p.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Bag

BIGRAM_JOINER = "▁"

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

FEATURE_CONFIG_VERSION = 1
STATS_VERSION = 1

TRANSFORMS = ("zscore", "log1p_zscore")
_CONSTANT_STD = 1e-12


@dataclass(frozen=True)
class TokenList:
    unigrams: tuple[str, ...]
    bigrams: tuple[str, ...]

    def __iter__(self):
        yield from self.unigrams
        yield from self.bigrams

    def __len__(self):
        return len(self.unigrams) + len(self.bigrams)


@dataclass(frozen=True, eq=False)
class HashedFeatures:
    ids: np.ndarray
    num_buckets: int

    def __eq__(self, other):
        return (
            isinstance(other, HashedFeatures)
            and self.num_buckets == other.num_buckets
            and np.array_equal(self.ids, other.ids)
        )

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True, eq=False)
class NumericFeatures:
    values: np.ndarray
    transforms: tuple[str, ...]

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class QueryFeatures:
    tokens: HashedFeatures


@dataclass(frozen=True)
class ItemFeatures:
    item_id: int
    tokens: HashedFeatures
    numeric: NumericFeatures


@dataclass(frozen=True)
class UserContext:
    action_tokens: HashedFeatures
    numeric: NumericFeatures


def tokenize(text: str) -> TokenList:
    unigrams = tuple(text.lower().split())
    bigrams = tuple(
        unigrams[i] + BIGRAM_JOINER + unigrams[i + 1] for i in range(len(unigrams) - 1)
    )
    return TokenList(unigrams, bigrams)


@lru_cache(maxsize=1 << 18)
def fnv1a64(token: str) -> int:
    h = FNV64_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def check_buckets(num_buckets: int) -> int:
    if (
        not isinstance(num_buckets, (int, np.integer))
        or num_buckets < 2
        or num_buckets & (num_buckets - 1)
    ):
        raise ConfigError(f"num_buckets must be a power of two >= 2, got {num_buckets!r}")
    return int(num_buckets)


def hash_tokens(tokens: TokenList, num_buckets: int) -> HashedFeatures:
    """Unigram ids then bigram ids, in order, duplicates kept."""
    mask = check_buckets(num_buckets) - 1
    ids = np.fromiter((fnv1a64(t) & mask for t in tokens), dtype=np.int64, count=len(tokens))
    ids.flags.writeable = False
    return HashedFeatures(ids, int(num_buckets))


def hash_text(text: str, num_buckets: int) -> HashedFeatures:
    return hash_tokens(tokenize(text), num_buckets)


@dataclass
class FeatureConfig:
    """Bucket counts per text field and the numeric schema of each entity."""

    query_buckets: int = 1 << 16
    item_buckets: int = 1 << 16
    action_buckets: int = 1 << 16
    item_numeric: list[str] = field(default_factory=list)
    item_transforms: list[str] = field(default_factory=list)
    user_numeric: list[str] = field(default_factory=list)
    user_transforms: list[str] = field(default_factory=list)
    schema_version: int = FEATURE_CONFIG_VERSION

    def __post_init__(self):
        for name in ("query_buckets", "item_buckets", "action_buckets"):
            check_buckets(getattr(self, name))
        for names, tags in (
            (self.item_numeric, self.item_transforms),
            (self.user_numeric, self.user_transforms),
        ):
            if len(names) != len(tags):
                raise ConfigError("every numeric dim needs exactly one transform tag")
            bad = [t for t in tags if t not in TRANSFORMS]
            if bad:
                raise ConfigError(f"unknown transform tags {bad}; expected one of {TRANSFORMS}")
        if self.schema_version != FEATURE_CONFIG_VERSION:
            raise ConfigError(f"unsupported feature config version {self.schema_version}")

    @property
    def item_numeric_dim(self) -> int:
        return len(self.item_numeric)

    @property
    def user_numeric_dim(self) -> int:
        return len(self.user_numeric)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "FeatureConfig":
        try:
            return cls(**json.loads(text))
        except TypeError as exc:
            raise ConfigError(f"feature config schema mismatch: {exc}") from None

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "FeatureConfig":
        return cls.from_json(Path(path).read_text())


def _apply_transforms(raw: np.ndarray, transforms: Sequence[str]) -> np.ndarray:
    x = np.array(raw, dtype=np.float64, copy=True)
    for j, tag in enumerate(transforms):
        if tag == "log1p_zscore":
            x[..., j] = np.log1p(np.maximum(x[..., j], 0.0))
    return x


@dataclass
class NumericStats:
    """Per-dimension mean/stddev of the transformed training values."""

    transforms: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.transforms)

    @property
    def constant(self) -> np.ndarray:
        return self.std < _CONSTANT_STD

    @classmethod
    def fit(cls, raw, transforms: Sequence[str]) -> "NumericStats":
        raw = np.asarray(raw, dtype=np.float64).reshape(-1, len(transforms))
        x = _apply_transforms(raw, transforms)
        if len(x) == 0:
            mean = np.zeros(len(transforms))
            std = np.zeros(len(transforms))
        else:
            mean = x.mean(axis=0)
            std = x.std(axis=0)
        return cls(tuple(transforms), mean, std)

    def transform(self, raw) -> np.ndarray:
        """Vectorized normalize over the last axis."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1:] != (self.dim,):
            raise ShapeError(f"numeric vector has shape {raw.shape}, expected (..., {self.dim})")
        x = _apply_transforms(raw, self.transforms)
        const = self.constant
        safe_std = np.where(const, 1.0, self.std)
        out = (x - self.mean) / safe_std
        out[..., const] = 0.0
        if not np.all(np.isfinite(out)):
            raise ShapeError("numeric features contain non-finite values")
        return out

    def to_dict(self) -> dict:
        return {
            "transforms": list(self.transforms),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NumericStats":
        return cls(tuple(d["transforms"]), np.array(d["mean"], float), np.array(d["std"], float))


def normalize_numeric(raw, stats: NumericStats) -> NumericFeatures:
    values = stats.transform(raw)
    if values.ndim != 1:
        raise ShapeError("normalize_numeric takes a single vector; use NumericStats.transform")
    values.flags.writeable = False
    return NumericFeatures(values, stats.transforms)


@dataclass
class FeatureStats:
    """The stats file: numeric statistics per entity, versioned."""

    item: NumericStats
    user: NumericStats
    schema_version: int = STATS_VERSION

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": self.schema_version,
                "item": self.item.to_dict(),
                "user": self.user.to_dict(),
            },
            sort_keys=True,
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "FeatureStats":
        d = json.loads(text)
        if d.get("schema_version") != STATS_VERSION:
            raise ConfigError(f"unsupported stats version {d.get('schema_version')!r}")
        return cls(NumericStats.from_dict(d["item"]), NumericStats.from_dict(d["user"]))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "FeatureStats":
        return cls.from_json(Path(path).read_text())


class Featurizer:
    """Binds a FeatureConfig to fitted stats and produces model inputs."""

    def __init__(self, config: FeatureConfig, stats: FeatureStats):
        if stats.item.transforms != tuple(config.item_transforms):
            raise ConfigError("item stats do not match the feature config transforms")
        if stats.user.transforms != tuple(config.user_transforms):
            raise ConfigError("user stats do not match the feature config transforms")
        self.config = config
        self.stats = stats

    def query(self, text: str) -> QueryFeatures:
        return QueryFeatures(hash_text(text, self.config.query_buckets))

    def item(self, item_id: int, title: str, numeric_raw) -> ItemFeatures:
        return ItemFeatures(
            int(item_id),
            hash_text(title, self.config.item_buckets),
            normalize_numeric(numeric_raw, self.stats.item),
        )

    def user(self, history_titles: Sequence[str], numeric_raw) -> UserContext:
        return UserContext(
            action_tokens(history_titles, self.config.action_buckets),
            normalize_numeric(numeric_raw, self.stats.user),
        )


def action_tokens(history_titles: Sequence[str], num_buckets: int) -> HashedFeatures:
    """Click-stream tokens: each history title hashed on its own, then concatenated."""
    parts = [hash_text(t, num_buckets).ids for t in history_titles]
    ids = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    ids.flags.writeable = False
    return HashedFeatures(ids, int(num_buckets))


def ngram_count(n_unigrams: int) -> int:
    return n_unigrams + max(0, n_unigrams - 1)


class TokenStore:
    """Hashed id lists for many texts, stored CSR-style for fast batch gathering."""

    def __init__(self, offsets: np.ndarray, flat: np.ndarray, num_buckets: int):
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.flat = np.asarray(flat, dtype=np.int64)
        self.num_buckets = int(num_buckets)

    def __len__(self):
        return len(self.offsets) - 1

    @classmethod
    def from_hashed(cls, hashed: Sequence[HashedFeatures], num_buckets: int) -> "TokenStore":
        lengths = [len(h.ids) for h in hashed]
        offsets = np.zeros(len(hashed) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        flat = (
            np.concatenate([h.ids for h in hashed]) if offsets[-1] else np.zeros(0, np.int64)
        )
        return cls(offsets, flat, num_buckets)

    @classmethod
    def from_texts(cls, texts: Sequence[str], num_buckets: int) -> "TokenStore":
        return cls.from_hashed([hash_text(t, num_buckets) for t in texts], num_buckets)

    def row(self, i: int) -> HashedFeatures:
        ids = self.flat[self.offsets[i] : self.offsets[i + 1]].copy()
        ids.flags.writeable = False
        return HashedFeatures(ids, self.num_buckets)

    def bag(self, rows) -> Bag:
        return Bag.from_csr(self.offsets, self.flat, rows)
