"""Binary model checkpoints.

Layout (little-endian)::

    magic ("DSRM" | "DPRM") | u32 version | u32 descriptor length
    descriptor: UTF-8 JSON (sorted keys) with tower architectures
    parameters: float32 arrays, concatenated in declaration order
    u64 CRC-64/XZ of every preceding byte

Parameters are trained in float64 and downcast on save; a loaded model holds
the float32 values widened back to float64, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .crc64 import crc64
from .dpr import PairwiseModel
from .dsr import TwoTowerModel
from .errors import ChecksumError, ConfigError, FormatError, MagicError, UnsupportedVersionError
from .nn import Tower

DSR_MAGIC = b"DSRM"
DPR_MAGIC = b"DPRM"
VERSION = 1
_HEAD = struct.Struct("<4sII")


def _descriptor(model) -> tuple[bytes, dict, list[np.ndarray]]:
    if isinstance(model, TwoTowerModel):
        towers = model.towers()
        desc = {"kind": "dsr", "towers": {n: t.architecture() for n, t in towers.items()}}
        arrays = [a for t in towers.values() for a in t.params().values()]
        return DSR_MAGIC, desc, arrays
    if isinstance(model, PairwiseModel):
        desc = {
            "kind": "dpr",
            "tower": model.tower.architecture(),
            "user_numeric_dim": model.user_numeric_dim,
            "item_numeric_dim": model.item_numeric_dim,
        }
        return DPR_MAGIC, desc, list(model.params().values())
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def to_bytes(model, query_only: bool = False) -> bytes:
    """Serialize; ``query_only`` drops the item tower of a two-tower model."""
    if query_only:
        if not isinstance(model, TwoTowerModel):
            raise ConfigError("query_only applies to two-tower models")
        stripped = TwoTowerModel.__new__(TwoTowerModel)
        stripped.query_tower, stripped.item_tower = model.query_tower, None
        model = stripped
    magic, desc, arrays = _descriptor(model)
    dbytes = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_HEAD.pack(magic, VERSION, len(dbytes)), dbytes]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays]
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64(body))


def save_checkpoint(model, path, query_only: bool = False) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model, query_only))
    os.replace(tmp, path)


def _fill(towers: list[Tower], body: bytes, pos: int) -> int:
    for tower in towers:
        for name, arr in tower.params().items():
            n = arr.size * 4
            if pos + n > len(body):
                raise FormatError(f"parameter block {name} runs past the end of the file", pos)
            arr[...] = np.frombuffer(body, dtype="<f4", count=arr.size, offset=pos).reshape(arr.shape)
            pos += n
    return pos


def _check_tower(arch: dict, what: str) -> Tower:
    try:
        return Tower.from_architecture(arch)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: incompatible architecture descriptor ({exc})") from None


def from_bytes(data: bytes, expect_magic: bytes | None = None):
    if len(data) < 4:
        raise FormatError("file too short for a checkpoint header", 0)
    magic = bytes(data[:4])
    if magic not in (DSR_MAGIC, DPR_MAGIC):
        raise MagicError(f"bad magic {magic!r}", 0)
    if expect_magic is not None and magic != expect_magic:
        raise MagicError(f"expected a {expect_magic.decode()} checkpoint, found {magic.decode()}", 0)
    if len(data) < _HEAD.size:
        raise ChecksumError("file shorter than header", len(data))
    _, version, dlen = _HEAD.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (reader supports {VERSION})", 4)
    if len(data) < _HEAD.size + 8:
        raise ChecksumError("missing checksum trailer", len(data))
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    actual = crc64(body)
    if actual != stored:
        raise ChecksumError(f"checksum mismatch: stored {stored:#018x}, computed {actual:#018x}",
                            len(data) - 8)
    pos = _HEAD.size
    try:
        desc = json.loads(bytes(body[pos : pos + dlen]).decode("utf-8"))
    except ValueError:
        raise FormatError("architecture descriptor is not valid JSON", pos) from None
    pos += dlen
    if magic == DSR_MAGIC:
        if desc.get("kind") != "dsr" or "query" not in desc.get("towers", {}):
            raise ConfigError("DSRM descriptor must describe at least a query tower")
        model = TwoTowerModel.__new__(TwoTowerModel)
        model.query_tower = _check_tower(desc["towers"]["query"], "query tower")
        item = desc["towers"].get("item")
        model.item_tower = _check_tower(item, "item tower") if item is not None else None
        towers = list(model.towers().values())
    else:
        if desc.get("kind") != "dpr":
            raise ConfigError("DPRM descriptor has the wrong kind")
        arch = desc["tower"]
        if arch.get("activations") != ["relu", "relu", "relu", "identity"] or arch.get("widths", [None])[-1] != 1:
            raise ConfigError("DPRM tower must be 3 ReLU layers and a scalar linear output")
        model = PairwiseModel.__new__(PairwiseModel)
        model.user_numeric_dim = int(desc["user_numeric_dim"])
        model.item_numeric_dim = int(desc["item_numeric_dim"])
        model.tower = _check_tower(arch, "ranking tower")
        if model.tower.numeric_dim != model.user_numeric_dim + model.item_numeric_dim:
            raise ConfigError("DPRM numeric dims disagree with the tower input")
        towers = [model.tower]
    pos = _fill(towers, body, pos)
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} unexpected bytes after the parameters", pos)
    return model


def load_checkpoint(path, expect_magic: bytes | None = None):
    return from_bytes(Path(path).read_bytes(), expect_magic)


def load_dsr(path) -> TwoTowerModel:
    return load_checkpoint(path, DSR_MAGIC)


def load_dpr(path) -> PairwiseModel:
    return load_checkpoint(path, DPR_MAGIC)
