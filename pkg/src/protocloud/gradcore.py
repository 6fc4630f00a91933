"""Dense 2-D reverse-mode autodiff and Adam.

Every value is a 2-D float64 array (vectors are 1 x d or d x 1). Operations
record their parents and a backward closure; :class:`Tape` replays them in
reverse creation order. Broadcasting is limited to scalar scaling plus the
explicit :func:`add_row` bias op.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError, UsageError

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "name", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, name=None, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.name = name
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def parameter(data, name):
    return Tensor(data, name=name, requires_grad=True)


def constant(data):
    return Tensor(data)


def _lift(x, shape):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(shape, float(x)))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._id = next(_ids)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- operations


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), backward)


def add(a, b):
    _same_shape("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    """Elementwise product of equal-shape tensors."""
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, s):
    s = float(s)
    return _record(a.data * s, (a,), lambda g: (g * s,))


def add_row(x, b):
    """Add the 1 x c row ``b`` to every row of ``x``."""
    if b.shape[0] != 1 or b.shape[1] != x.shape[1]:
        raise ShapeError(f"add_row: row {b.shape} does not fit {x.shape}")
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0, keepdims=True)))


def transpose(a):
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, rows, cols):
    if rows * cols != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as ({rows}, {cols})")
    shape = a.shape
    return _record(a.data.reshape(rows, cols), (a,), lambda g: (g.reshape(shape),))


def tsum(a, axis=None):
    """Sum to 1x1 (axis=None), to 1 x c (axis=0) or to r x 1 (axis=1)."""
    shape = a.shape
    if axis is None:
        return _record(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))
    if axis == 0:
        return _record(a.data.sum(axis=0, keepdims=True), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    if axis == 1:
        return _record(a.data.sum(axis=1, keepdims=True), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    raise UsageError(f"axis must be None, 0 or 1, got {axis}")


def mean(a):
    return scale(tsum(a), 1.0 / a.data.size)


def relu(a):
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a):
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive entry")
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def clip(a, lo, hi):
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def log_sum_exp(a, axis=None):
    """Stable log-sum-exp over all entries (1x1) or along rows (r x 1)."""
    x = a.data
    if axis is None:
        m = x.max()
        e = np.exp(x - m)
        total = e.sum()
        soft = e / total
        return _record(np.array([[m + np.log(total)]]), (a,), lambda g: (g[0, 0] * soft,))
    if axis == 1:
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
        total = e.sum(axis=1, keepdims=True)
        soft = e / total
        return _record(m + np.log(total), (a,), lambda g: (g * soft,))
    raise UsageError("log_sum_exp supports axis=None or axis=1")


def concat(a, b):
    """Concatenate along the feature (column) axis."""
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat: row mismatch {a.shape} vs {b.shape}")
    k = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _record(out, (a, b), lambda g: (g[:, :k], g[:, k:]))


def dropout(a, p, train, rng):
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _record(a.data * keep, (a,), lambda g: (g * keep,))


class SumTable:
    """Row-gather table: output row i is the sum of input rows ``table[i]``.

    Entries of -1 are padding. The transposed table is built once so that
    the backward pass is also a gather (no scatter-add).
    """

    __slots__ = ("table", "table_t", "n_in")

    def __init__(self, table, n_in):
        table = np.asarray(table, dtype=np.int64)
        if table.ndim == 1:
            table = table[:, None]
        self.table = table
        self.n_in = int(n_in)
        rows = np.repeat(np.arange(table.shape[0]), table.shape[1])
        flat = table.ravel()
        valid = flat >= 0
        rows, cols = rows[valid], flat[valid]
        if cols.size and cols.max() >= self.n_in:
            raise ShapeError(f"gather index {cols.max()} out of range for {self.n_in} rows")
        order = np.argsort(cols, kind="stable")
        rows, cols = rows[order], cols[order]
        counts = np.bincount(cols, minlength=self.n_in)
        width = max(int(counts.max()) if counts.size else 0, 1)
        starts = np.cumsum(counts) - counts
        pos = np.arange(cols.size) - np.repeat(starts, counts)
        table_t = np.full((self.n_in, width), -1, dtype=np.int64)
        table_t[cols, pos] = rows
        self.table_t = table_t


def _padded_gather_sum(x, table):
    padded = np.vstack([x, np.zeros((1, x.shape[1]))])
    idx = np.where(table < 0, x.shape[0], table)
    return padded[idx].sum(axis=1)


def gather_sum(x, st):
    if x.shape[0] != st.n_in:
        raise ShapeError(f"gather_sum: table expects {st.n_in} rows, got {x.shape}")
    out = _padded_gather_sum(x.data, st.table)
    return _record(out, (x,), lambda g: (_padded_gather_sum(g, st.table_t),))


def gather_rows(x, index):
    return gather_sum(x, SumTable(np.asarray(index)[:, None], x.shape[0]))


# ------------------------------------------------------------------ backward


class Tape:
    """Nodes reachable from ``root`` in creation (= topological) order."""

    def __init__(self, root):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            node = stack.pop()
            if node._id in seen or not node.requires_grad:
                continue
            seen.add(node._id)
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda t: t._id)
        self.root = root
        self.nodes = nodes

    def backward(self, seed=None):
        """Return ``{node id: gradient}`` for every leaf reachable from the root."""
        root = self.root
        if seed is None:
            seed = np.ones(root.shape)
        grads = {root._id: np.asarray(seed, dtype=np.float64).reshape(root.shape)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                leaves[node._id] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg
        return leaves


def backward(loss, params):
    """Gradients of the scalar ``loss`` for each parameter, keyed by name.

    Parameters that the loss does not depend on receive zeros.
    """
    if loss.shape != (1, 1):
        raise UsageError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    leaves = Tape(loss).backward() if loss.requires_grad else {}
    out = {}
    for p in params:
        g = leaves.get(p._id)
        out[p.name] = np.zeros(p.shape) if g is None else g
    return out


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lrs: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_groups(cls, groups):
        """``groups`` maps group name -> (list of parameters, learning rate)."""
        lrs = {}
        for params, lr in groups.values():
            for p in params:
                if p.name in lrs:
                    raise ConfigError(f"parameter {p.name!r} appears in two groups")
                lrs[p.name] = float(lr)
        return cls(lrs=lrs)


def adam_step(params, grads, state):
    """One bias-corrected Adam update applied in place to ``params``."""
    for p in params:
        g = grads[p.name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {p.name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {p.name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params:
        g = grads[p.name]
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros(p.shape)
            state.v[p.name] = np.zeros(p.shape)
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        lr = state.lrs[p.name]
        if lr == 0.0:
            continue
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
