"""Small numpy neural toolkit for the two tower topologies used here.

Everything trains in float64.  A :class:`Tower` is a set of sum-pooled
embedding tables whose outputs are concatenated with a numeric block, then fed
through dense layers, optionally ending in L2 normalization.  Backprop is
written out by hand; :func:`grad_check` compares it with central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, StateError

NORM_EPS = 1e-12
ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class Bag:
    """A batch of variable-length id lists: ``ids[i]`` belongs to row ``seg[i]``.

    ``seg`` is non-decreasing; rows with no ids are allowed.
    """

    ids: np.ndarray
    seg: np.ndarray
    n: int

    @classmethod
    def from_lists(cls, id_lists: Sequence[Sequence[int]]) -> "Bag":
        lengths = np.fromiter((len(x) for x in id_lists), dtype=np.int64, count=len(id_lists))
        if lengths.sum():
            ids = np.concatenate([np.asarray(x, dtype=np.int64) for x in id_lists])
        else:
            ids = np.zeros(0, dtype=np.int64)
        seg = np.repeat(np.arange(len(id_lists), dtype=np.int64), lengths)
        return cls(ids, seg, len(id_lists))

    @classmethod
    def from_csr(cls, offsets: np.ndarray, flat: np.ndarray, rows: np.ndarray) -> "Bag":
        """Gather ``rows`` out of a CSR store (``flat[offsets[r]:offsets[r+1]]``)."""
        rows = np.asarray(rows, dtype=np.int64)
        starts = offsets[rows]
        lengths = offsets[rows + 1] - starts
        total = int(lengths.sum())
        seg = np.repeat(np.arange(len(rows), dtype=np.int64), lengths)
        if total == 0:
            return cls(np.zeros(0, dtype=np.int64), seg, len(rows))
        # position of each gathered id inside its own row
        run_start = np.cumsum(lengths) - lengths
        within = np.arange(total, dtype=np.int64) - np.repeat(run_start, lengths)
        ids = flat[np.repeat(starts, lengths) + within]
        return cls(ids, seg, len(rows))

    @staticmethod
    def concat(bags: Sequence["Bag"]) -> "Bag":
        ids, segs, base = [], [], 0
        for b in bags:
            ids.append(b.ids)
            segs.append(b.seg + base)
            base += b.n
        return Bag(np.concatenate(ids), np.concatenate(segs), base)


@dataclass(frozen=True)
class SparseRows:
    """Gradient of an embedding table restricted to the rows a batch touched."""

    rows: np.ndarray
    values: np.ndarray

    def to_dense(self, shape) -> np.ndarray:
        out = np.zeros(shape)
        out[self.rows] = self.values
        return out


def _segment_sum(values: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets keyed by sorted ``seg``."""
    out = np.zeros((n,) + values.shape[1:])
    if len(seg) == 0:
        return out
    change = np.flatnonzero(np.diff(seg)) + 1
    starts = np.concatenate(([0], change))
    out[seg[starts]] = np.add.reduceat(values, starts, axis=0)
    return out


class EmbeddingTable:
    def __init__(self, rows: int, dim: int, weights: np.ndarray | None = None):
        self.rows = int(rows)
        self.dim = int(dim)
        if weights is None:
            weights = np.zeros((self.rows, self.dim))
        if weights.shape != (self.rows, self.dim):
            raise ShapeError(f"embedding weights {weights.shape} != ({rows}, {dim})")
        self.weights = weights

    def init(self, rng: np.random.Generator, std: float = 0.01):
        self.weights[...] = rng.normal(0.0, std, size=self.weights.shape)

    def _check(self, ids: np.ndarray):
        if len(ids) and (ids.min() < 0 or ids.max() >= self.rows):
            bad = ids[(ids < 0) | (ids >= self.rows)][0]
            raise IndexError(f"token id {bad} outside [0, {self.rows})")

    def pool(self, bag: Bag) -> np.ndarray:
        self._check(bag.ids)
        return _segment_sum(self.weights[bag.ids], bag.seg, bag.n)

    def grad(self, bag: Bag, upstream: np.ndarray) -> SparseRows:
        if len(bag.ids) == 0:
            return SparseRows(np.zeros(0, dtype=np.int64), np.zeros((0, self.dim)))
        order = np.argsort(bag.ids, kind="stable")
        sorted_ids = bag.ids[order]
        vals = upstream[bag.seg[order]]
        change = np.flatnonzero(np.diff(sorted_ids)) + 1
        starts = np.concatenate(([0], change))
        return SparseRows(sorted_ids[starts], np.add.reduceat(vals, starts, axis=0))


def embed_sum_pool(table: EmbeddingTable, ids) -> np.ndarray:
    """Sum of the table rows named by ``ids``; zeros for an empty list."""
    ids = getattr(ids, "ids", ids)
    return table.pool(Bag.from_lists([ids]))[0]


class DenseLayer:
    def __init__(self, in_dim: int, out_dim: int, activation: str = "relu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.W = np.zeros((out_dim, in_dim))
        self.b = np.zeros(out_dim)
        self.activation = activation

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def init(self, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (self.in_dim + self.out_dim))
        self.W[...] = rng.uniform(-limit, limit, size=self.W.shape)
        self.b[...] = 0.0

    def pre(self, x: np.ndarray, row_stable: bool = False) -> np.ndarray:
        """``W x + b`` per row.

        BLAS results for a row depend on the batch it sits in; ``row_stable``
        uses einsum's plain loops so a row's output is bit-identical no matter
        how it is batched.
        """
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"dense layer expects input dim {self.in_dim}, got {x.shape[-1]}")
        if row_stable:
            return np.einsum("...j,kj->...k", x, self.W) + self.b
        return x @ self.W.T + self.b

    def act(self, z: np.ndarray) -> np.ndarray:
        return np.maximum(z, 0.0) if self.activation == "relu" else z


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return layer.act(layer.pre(x, row_stable=True))


def l2_normalize(v) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise unit vectors plus a mask of degenerate rows mapped to e1."""
    v = np.asarray(v, dtype=np.float64)
    squeeze = v.ndim == 1
    v2 = v.reshape(1, -1) if squeeze else v
    norms = np.sqrt(np.einsum("ij,ij->i", v2, v2))
    degenerate = norms < NORM_EPS
    out = v2 / np.where(degenerate, 1.0, norms)[:, None]
    if degenerate.any():
        out[degenerate] = 0.0
        out[degenerate, 0] = 1.0
    if squeeze:
        return out[0], degenerate[0]
    return out, degenerate


@dataclass
class _Trace:
    bags: Mapping[str, Bag]
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    out_unnorm: np.ndarray | None = None
    norms: np.ndarray | None = None
    degenerate: np.ndarray | None = None
    out: np.ndarray | None = None


class Tower:
    """Embedding bags + numeric block -> dense stack -> optional L2 normalization.

    ``fields`` maps field name to (num_buckets, embedding_dim); concatenation
    order is the mapping order followed by the numeric block.
    """

    def __init__(
        self,
        fields: Mapping[str, tuple[int, int]],
        numeric_dim: int,
        widths: Sequence[int],
        activations: Sequence[str],
        normalize: bool,
    ):
        if len(widths) != len(activations):
            raise ShapeError("one activation per dense layer")
        self.tables = {name: EmbeddingTable(r, d) for name, (r, d) in fields.items()}
        self.numeric_dim = int(numeric_dim)
        self.normalize = bool(normalize)
        in_dim = sum(d for _, d in fields.values()) + self.numeric_dim
        self.layers = []
        for w, a in zip(widths, activations):
            self.layers.append(DenseLayer(in_dim, w, a))
            in_dim = w
        self._trace: _Trace | None = None

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def init(self, rng: np.random.Generator, emb_std: float = 0.01):
        for table in self.tables.values():
            table.init(rng, emb_std)
        for layer in self.layers:
            layer.init(rng)

    def params(self) -> dict[str, np.ndarray]:
        """Parameter arrays in declaration order (the checkpoint order)."""
        out = {f"emb.{name}": t.weights for name, t in self.tables.items()}
        for i, layer in enumerate(self.layers):
            out[f"dense{i}.W"] = layer.W
            out[f"dense{i}.b"] = layer.b
        return out

    def architecture(self) -> dict:
        return {
            # a list, not a mapping: field order fixes the input layout and survives sorted-key JSON
            "fields": [[n, t.rows, t.dim] for n, t in self.tables.items()],
            "numeric_dim": self.numeric_dim,
            "widths": [layer.out_dim for layer in self.layers],
            "activations": [layer.activation for layer in self.layers],
            "normalize": self.normalize,
        }

    @classmethod
    def from_architecture(cls, arch: dict) -> "Tower":
        return cls(
            {n: (int(rows), int(dim)) for n, rows, dim in arch["fields"]},
            arch["numeric_dim"],
            arch["widths"],
            arch["activations"],
            arch["normalize"],
        )

    def _input(self, bags: Mapping[str, Bag], numeric) -> np.ndarray:
        missing = set(self.tables) - set(bags)
        if missing:
            raise ShapeError(f"missing token fields {sorted(missing)}")
        n = next(iter(bags.values())).n if bags else len(numeric)
        parts = [self.tables[name].pool(bags[name]) for name in self.tables]
        if self.numeric_dim:
            numeric = np.asarray(numeric, dtype=np.float64)
            if numeric.shape != (n, self.numeric_dim):
                raise ShapeError(f"numeric block {numeric.shape} != ({n}, {self.numeric_dim})")
            parts.append(numeric)
        return np.concatenate(parts, axis=1) if parts else np.zeros((n, 0))

    def forward(self, bags: Mapping[str, Bag], numeric=None, record: bool = False) -> np.ndarray:
        """Batched forward.  ``record=True`` keeps activations for :meth:`backward`
        and uses BLAS; inference (``record=False``) is row-stable."""
        trace = _Trace(bags) if record else None
        h = self._input(bags, numeric)
        for layer in self.layers:
            z = layer.pre(h, row_stable=not record)
            if trace:
                trace.inputs.append(h)
                trace.pre.append(z)
            h = layer.act(z)
        if self.normalize:
            y, degenerate = l2_normalize(h)
            if trace:
                trace.out_unnorm = h
                trace.norms = np.sqrt(np.einsum("ij,ij->i", h, h))
                trace.degenerate = degenerate
            h = y
        if trace:
            trace.out = h
            self._trace = trace
        return h

    def kink_distance(self) -> float:
        """Smallest |pre-activation| of any ReLU in the last recorded forward."""
        if self._trace is None:
            raise StateError("no recorded forward pass")
        d = np.inf
        for layer, z in zip(self.layers, self._trace.pre):
            if layer.activation == "relu" and z.size:
                d = min(d, float(np.abs(z).min()))
        return d

    def backward(self, grad_out: np.ndarray) -> tuple[dict, np.ndarray]:
        """Gradients w.r.t. every parameter and w.r.t. the concatenated input.

        Embedding gradients come back as :class:`SparseRows`.  Consumes the
        recorded forward pass.
        """
        trace = self._trace
        if trace is None:
            raise StateError("backward called without a recorded forward pass")
        self._trace = None
        g = np.asarray(grad_out, dtype=np.float64).reshape(trace.out.shape)
        if self.normalize:
            y = trace.out
            g = (g - y * np.einsum("ij,ij->i", y, g)[:, None]) / np.where(
                trace.degenerate, 1.0, trace.norms
            )[:, None]
            g[trace.degenerate] = 0.0
        grads: dict = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.activation == "relu":
                g = g * (trace.pre[i] > 0)
            grads[f"dense{i}.W"] = g.T @ trace.inputs[i]
            grads[f"dense{i}.b"] = g.sum(axis=0)
            g = g @ layer.W
        grad_input = g
        col = 0
        emb_grads = {}
        for name, table in self.tables.items():
            emb_grads[f"emb.{name}"] = table.grad(trace.bags[name], g[:, col : col + table.dim])
            col += table.dim
        ordered = {**emb_grads}
        for i in range(len(self.layers)):
            ordered[f"dense{i}.W"] = grads[f"dense{i}.W"]
            ordered[f"dense{i}.b"] = grads[f"dense{i}.b"]
        return ordered, grad_input


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping, state: AdamState) -> AdamState:
    """Bias-corrected Adam, in place.  SparseRows gradients touch only their rows.

    A non-finite gradient anywhere rejects the whole step before anything changes.
    """
    for name, g in grads.items():
        vals = g.values if isinstance(g, SparseRows) else g
        if not np.all(np.isfinite(vals)):
            raise NonFiniteError(f"non-finite gradient for {name}; step rejected")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if isinstance(g, SparseRows):
            r = g.rows
            m[r] = b1 * m[r] + (1.0 - b1) * g.values
            v[r] = b2 * v[r] + (1.0 - b2) * g.values**2
            p[r] -= state.lr * (m[r] / c1) / (np.sqrt(v[r] / c2) + state.eps)
        else:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g**2
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def grad_check(
    params: Mapping[str, np.ndarray],
    loss: Callable[[], float],
    analytic: Mapping,
    eps: float = 1e-4,
    rel_floor: float = 1e-3,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``loss``.

    ``loss`` re-evaluates the model from the current contents of ``params``.
    For SparseRows gradients only the touched rows are probed; every other
    row of a table cannot influence the loss.  Entries far below the largest
    gradient are measured against ``rel_floor`` times that largest gradient:
    for them the central difference is dominated by its O(eps^2) truncation
    and roundoff, not by the analytic value.
    """
    probes = []
    for name, g in analytic.items():
        p = params[name]
        if isinstance(g, SparseRows):
            coords = [(int(r), j) for r in g.rows for j in range(p.shape[1])]
            dense = g.to_dense(p.shape)
        else:
            coords = list(np.ndindex(p.shape))
            dense = np.asarray(g).reshape(p.shape)
        probes.append((p, dense, coords))
    scale = max((float(np.abs(d).max(initial=0.0)) for _, d, _ in probes), default=0.0)
    floor = max(1e-8, rel_floor * scale)
    worst = 0.0
    for p, dense, coords in probes:
        for idx in coords:
            orig = p[idx]
            p[idx] = orig + eps
            f_plus = loss()
            p[idx] = orig - eps
            f_minus = loss()
            p[idx] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            a = dense[idx]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
