"""Prototype readouts and the final MLP.

A graph's projected node cloud H' is compared with M trainable prototype
clouds of N points each. Entry i of the readout is ``n * N * W(H', Q_i)``,
where W is the exact transport cost between uniform clouds. The plan is
solved numerically and then held constant, so gradients flow only through
the cost matrix.

Prototypes are stored as one (M*N) x d parameter, prototype i owning rows
``i*N:(i+1)*N``. For a batch, the readout of every graph against every
prototype is ``S_g^T (P * C) S_p`` with constant indicator matrices S_g
(node -> graph), S_p (prototype point -> prototype) and scaled plans P.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from . import otcore
from .encoder import as_batch, glorot
from .errors import FeasibilityError, ShapeError, SolverError, UsageError
from .otcore import CostKind

PLAN_TOL = 1e-6


class HeadKind(enum.Enum):
    PROTOW_L2 = "ProtoW-L2"
    PROTOW_DOT = "ProtoW-Dot"
    PROTOS_L2 = "ProtoS-L2"
    BASELINE_SUM = "BaselineSum"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).replace("_", "").replace("-", "").lower()
        for kind in cls:
            if kind.value.replace("-", "").lower() == key:
                return kind
        raise UsageError(f"unknown head {value!r}; choose from {[k.value for k in cls]}")

    @property
    def uses_prototypes(self):
        return self is not HeadKind.BASELINE_SUM

    @property
    def uses_transport(self):
        return self in (HeadKind.PROTOW_L2, HeadKind.PROTOW_DOT)

    @property
    def cost(self):
        """Ground cost implied by the head (None when no transport is solved)."""
        return {HeadKind.PROTOW_L2: CostKind.SQUARED_L2,
                HeadKind.PROTOW_DOT: CostKind.NEGATIVE_DOT}.get(self)


@dataclass
class PrototypeSet:
    """M clouds of N points in R^d stored as one (M*N) x d parameter."""

    points: gc.Tensor
    n_protos: int
    size: int

    def __post_init__(self):
        if self.n_protos < 1 or self.size < 1:
            raise ShapeError("need at least one prototype with at least one point")
        if self.points.shape[0] != self.n_protos * self.size:
            raise ShapeError(
                f"{self.points.shape[0]} prototype rows do not match {self.n_protos} x {self.size}")

    @property
    def dim(self):
        return self.points.shape[1]

    def cloud(self, i):
        return self.points.data[i * self.size:(i + 1) * self.size]

    @classmethod
    def init(cls, n_protos, size, dim, rng, name="prototypes.Q"):
        Q = rng.uniform(-1.0, 1.0, size=(n_protos * size, dim))
        return cls(gc.parameter(Q, name), n_protos, size)


@dataclass
class PlanAudit:
    """Counts plans checked for marginal feasibility; raises on a violation."""

    exact: int = 0
    sinkhorn: int = 0
    permuted: int = 0
    ordering: int = 0
    worst: dict = field(default_factory=lambda: {"exact": 0.0, "sinkhorn": 0.0, "permuted": 0.0})

    def record(self, kind, count, violation, tol):
        setattr(self, kind, getattr(self, kind) + count)
        self.worst[kind] = max(self.worst[kind], float(violation))
        if violation > tol:
            raise FeasibilityError(f"{kind} plan violates its marginals by {violation:.3g} (tol {tol:g})")


def project_nodes(H, P_proj):
    """Map node embeddings (rows of H) into prototype space: H P_proj^T."""
    if P_proj.shape[1] != H.shape[1]:
        raise ShapeError(f"projection expects width {P_proj.shape[1]}, embeddings have {H.shape[1]}")
    return gc.matmul(H, gc.transpose(P_proj))


def _row_norms(X):
    return gc.tsum(gc.mul(X, X), axis=1)


def pairwise_cost(X, Y, kind):
    """Differentiable ground cost between the rows of X and the rows of Y."""
    kind = CostKind.parse(kind)
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"point dimensions differ: d={X.shape[1]} vs d={Y.shape[1]}")
    cross = gc.matmul(X, gc.transpose(Y))
    if kind is CostKind.NEGATIVE_DOT:
        return gc.scale(cross, -1.0)
    ones_y = gc.constant(np.ones((1, Y.shape[0])))
    ones_x = gc.constant(np.ones((X.shape[0], 1)))
    sq = gc.add(gc.matmul(_row_norms(X), ones_y), gc.matmul(ones_x, gc.transpose(_row_norms(Y))))
    return gc.sub(sq, gc.scale(cross, 2.0))


def prototype_indicator(n_protos, size):
    """Constant (M*N) x M matrix mapping prototype points to prototypes."""
    return np.kron(np.eye(n_protos), np.ones((size, 1)))


def block_values(C, plans, membership, S_p):
    """``membership^T (plans * C) S_p``: one transport cost per (graph, prototype)."""
    weighted = gc.mul(gc.constant(plans), C)
    return gc.matmul(gc.matmul(gc.constant(membership.T), weighted), gc.constant(S_p))


@dataclass
class Readout:
    """Readout of a batch: values (n_graphs x M) plus the cached plans."""

    values: gc.Tensor
    cost: gc.Tensor | None = None
    plans: np.ndarray | None = None
    scale: np.ndarray | None = None
    offsets: np.ndarray | None = None
    size: int = 1
    kind: CostKind | None = None

    def graph_plans(self, g):
        """Normalized plans of graph ``g`` as an (M, n, N) array."""
        if self.plans is None:
            raise SolverError("this readout solved no transport plans")
        a, b = self.offsets[g], self.offsets[g + 1]
        block = self.plans[a:b]
        return block.reshape(b - a, -1, self.size).transpose(1, 0, 2)


def _check_plans(P, batch, size, audit):
    n = batch.sizes[:, None]
    rows = P.reshape(P.shape[0], -1, size).sum(axis=2)
    row_err = np.abs(rows - 1.0 / np.repeat(n, batch.sizes, axis=0)).max()
    cols = batch.membership().T @ P
    col_err = np.abs(cols - 1.0 / size).max()
    audit.record("exact", len(batch) * (P.shape[1] // size), max(row_err, col_err, -P.min()), PLAN_TOL)


def readout(Hp, protos, batch, kind, audit=None):
    """Scaled transport readout of every graph in ``batch`` against every prototype."""
    batch = as_batch(batch)
    kind = CostKind.parse(kind)
    if Hp.shape[0] != batch.n_nodes:
        raise ShapeError(f"cloud has {Hp.shape[0]} rows for a batch of {batch.n_nodes} nodes")
    if Hp.shape[1] != protos.dim:
        raise ShapeError(f"point dimensions differ: d={Hp.shape[1]} vs d={protos.dim}")
    C = pairwise_cost(Hp, protos.points, kind)
    P = otcore.emd_blocks(C.data, batch.node_offsets, protos.size)
    if audit is not None:
        _check_plans(P, batch, protos.size, audit)
    scale = (np.repeat(batch.sizes, batch.sizes) * protos.size)[:, None]
    S_p = prototype_indicator(protos.n_protos, protos.size)
    values = block_values(C, P * scale, batch.membership(), S_p)
    return Readout(values, C, P, scale, batch.node_offsets, protos.size, kind)


def readout_backward(ro, Hp, protos, upstream, batch):
    """Fixed-plan gradients of ``sum(upstream * ro.values)`` for H' and Q.

    Written out analytically; used to cross-check the taped gradients.
    """
    if ro.plans is None:
        raise SolverError("no cached plans: run readout first")
    batch = as_batch(batch)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != ro.values.shape:
        raise ShapeError(f"upstream gradient {upstream.shape} vs readout {ro.values.shape}")
    weight = batch.membership() @ upstream @ prototype_indicator(protos.n_protos, protos.size).T
    A = ro.plans * ro.scale * weight
    H = Hp.data if isinstance(Hp, gc.Tensor) else np.asarray(Hp)
    Q = protos.points.data
    if ro.kind is CostKind.NEGATIVE_DOT:
        return -A @ Q, -A.T @ H
    gH = 2.0 * (A.sum(axis=1, keepdims=True) * H - A @ Q)
    gQ = 2.0 * (A.sum(axis=0)[:, None] * Q - A.T @ H)
    return gH, gQ


def readout_sum(Hp, protos, batch):
    """Squared Euclidean distance of each graph's summed cloud to each prototype point."""
    batch = as_batch(batch)
    if protos.size != 1:
        raise ShapeError("the summed-cloud readout uses single-point prototypes")
    if Hp.shape[1] != protos.dim:
        raise ShapeError(f"point dimensions differ: d={Hp.shape[1]} vs d={protos.dim}")
    summed = gc.gather_sum(Hp, batch.graph_table)
    columns = []
    for i in range(protos.n_protos):
        diff = gc.sub(summed, gc.gather_rows(protos.points, np.full(len(batch), i)))
        columns.append(_row_norms(diff))
    values = columns[0]
    for col in columns[1:]:
        values = gc.concat(values, col)
    return Readout(values)


@dataclass
class MLPParams:
    W1: gc.Tensor
    b1: gc.Tensor
    W2: gc.Tensor
    b2: gc.Tensor
    dropout: float = 0.0

    def parameters(self):
        return [self.W1, self.b1, self.W2, self.b2]

    @classmethod
    def init(cls, n_in, n_hidden, rng, dropout=0.0):
        return cls(
            gc.parameter(glorot(rng, n_hidden, n_in), "mlp.W1"),
            gc.parameter(np.zeros((1, n_hidden)), "mlp.b1"),
            gc.parameter(glorot(rng, 1, n_hidden), "mlp.W2"),
            gc.parameter(np.zeros((1, 1)), "mlp.b2"),
            dropout=dropout,
        )


def mlp_head(r, params, train=False, rng=None):
    """One hidden ReLU layer with dropout, then a scalar output per row."""
    if r.shape[1] != params.W1.shape[1]:
        raise ShapeError(f"MLP expects {params.W1.shape[1]} inputs, got {r.shape[1]}")
    hidden = gc.relu(gc.add_row(gc.matmul(r, gc.transpose(params.W1)), params.b1))
    hidden = gc.dropout(hidden, params.dropout, train, rng)
    return gc.add_row(gc.matmul(hidden, gc.transpose(params.W2)), params.b2)
