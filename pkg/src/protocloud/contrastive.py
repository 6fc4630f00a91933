"""Contrastive regularizer that keeps prototype clouds from collapsing.

For each graph and prototype the optimal plan T* should beat a set of
feasible but wrong plans. With every plan held constant, the term

    log( exp(-W_{T*}) / (exp(-W_{T*}) + sum_{T in Neg} exp(-W_T)) )

is maximized, where W_T = sum(T * C) uses normalized (unscaled) plans.
Negatives are Sinkhorn projections of uniform [0, 10) matrices and random
column permutations of T*.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .encoder import as_batch
from .errors import FeasibilityError, ShapeError, UsageError
from .otcore import sinkhorn_project
from .protohead import PLAN_TOL, block_values, pairwise_cost, prototype_indicator

N_SINKHORN = 5
N_PERMUTED = 5
SINKHORN_TOL = 1e-3
NOISE_HIGH = 10.0


@dataclass
class NegativeSet:
    """Negatives for one graph: ``plans[i, k]`` is negative k of prototype i."""

    plans: np.ndarray
    n_sinkhorn: int
    n_permuted: int
    sinkhorn_violation: float = 0.0
    sinkhorn_fallback: bool = False

    def __len__(self):
        return self.plans.shape[-3]


def _positive_noise(rng, shape):
    M = rng.uniform(0.0, NOISE_HIGH, size=shape)
    # Sinkhorn needs strictly positive entries; exact zeros are redrawn
    while not np.all(M > 0):
        zero = M <= 0
        M[zero] = rng.uniform(0.0, NOISE_HIGH, size=int(zero.sum()))
    return M


def _column_permutations(rng, count, m):
    """``count`` uniform permutations of range(m), none of them the identity."""
    perms = np.argsort(rng.random((count, m)), axis=1)
    identity = np.arange(m)
    while True:
        redo = np.flatnonzero((perms == identity).all(axis=1))
        if not redo.size:
            return perms
        perms[redo] = np.argsort(rng.random((redo.size, m)), axis=1)


def make_negatives(T_opt, rng, n_sinkhorn=N_SINKHORN, n_permuted=N_PERMUTED, tol=SINKHORN_TOL):
    """Build negatives for one plan (n, m) or a stack of plans (M, n, m).

    Permuted slots fall back to Sinkhorn negatives when m == 1, since the
    only permutation of one column is the identity.
    """
    T = np.asarray(T_opt, dtype=np.float64)
    single = T.ndim == 2
    if single:
        T = T[None]
    if T.ndim != 3:
        raise ShapeError(f"expected an (n, m) plan or an (M, n, m) stack, got shape {np.shape(T_opt)}")
    if n_sinkhorn < 0 or n_permuted < 0:
        raise UsageError("negative counts must be nonnegative")
    M, n, m = T.shape
    fallback = m == 1 and n_permuted > 0
    n_noise = n_sinkhorn + (n_permuted if fallback else 0)
    out = np.empty((M, n_sinkhorn + n_permuted, n, m))
    violation = 0.0
    if n_noise:
        noise, violation, _ = sinkhorn_project(_positive_noise(rng, (M * n_noise, n, m)), tol=tol)
        out[:, :n_noise] = noise.reshape(M, n_noise, n, m)
    if not fallback and n_permuted:
        perms = _column_permutations(rng, M * n_permuted, m).reshape(M, n_permuted, 1, m)
        stacked = np.broadcast_to(T[:, None], (M, n_permuted, n, m))
        out[:, n_sinkhorn:] = np.take_along_axis(stacked, np.broadcast_to(perms, stacked.shape), axis=3)
    negs = NegativeSet(out, n_sinkhorn, n_permuted, violation, fallback)
    if single:
        negs.plans = out[0]
    return negs


def contrastive_term(values):
    """Sum over rows of ``-W_0 - logsumexp(-W_row)``; column 0 holds the optimal cost."""
    if values.shape[1] == 1:
        return gc.constant(np.zeros((1, 1)))
    neg = gc.scale(values, -1.0)
    first = np.zeros(values.shape)
    first[:, 0] = 1.0
    return gc.sub(gc.tsum(gc.mul(neg, gc.constant(first))), gc.tsum(gc.log_sum_exp(neg, axis=1)))


def transport_values(C, plan_stack, membership, S_p):
    """Costs of a stack of plan layouts: (K, nodes, M*N) -> list of (graphs x M) tensors."""
    return [block_values(C, P, membership, S_p) for P in plan_stack]


def _layout(batch, negatives, width):
    """Scatter per-graph negatives into (K, nodes, M*N) dense plan layouts."""
    K = len(negatives[0])
    out = np.zeros((K, batch.n_nodes, width))
    for (a, b), negs in zip(batch.slices(), negatives):
        M, _, n, N = negs.plans.shape
        out[:, a:b] = negs.plans.transpose(1, 2, 0, 3).reshape(K, n, M * N)
    return out


def nc_loss(Hp, protos, plans, negatives, kind, batch, audit=None, cost=None):
    """Mean over graphs of the summed per-prototype contrastive terms.

    ``plans`` is the normalized optimal layout (nodes x M*N) returned by the
    readout; ``negatives`` holds one :class:`NegativeSet` per graph. A cost
    tensor already built from ``Hp`` may be passed as ``cost``.
    """
    batch = as_batch(batch)
    if len(negatives) != len(batch):
        raise ShapeError(f"{len(negatives)} negative sets for {len(batch)} graphs")
    C = pairwise_cost(Hp, protos.points, kind) if cost is None else cost
    membership = batch.membership()
    S_p = prototype_indicator(protos.n_protos, protos.size)
    W_opt = block_values(C, plans, membership, S_p)
    rows = len(batch) * protos.n_protos
    values = gc.reshape(W_opt, rows, 1)
    if len(negatives[0]):
        layouts = _layout(batch, negatives, protos.points.shape[0])
        for W in transport_values(C, layouts, membership, S_p):
            values = gc.concat(values, gc.reshape(W, rows, 1))
    if audit is not None:
        audit_negatives(values.data, negatives, C.data, audit)
    return gc.scale(contrastive_term(values), 1.0 / len(batch))


def audit_negatives(values, negatives, C, audit):
    """Check negative feasibility and that no negative beats the optimal plan."""
    violation = 0.0
    for negs in negatives:
        violation = max(violation, negs.sinkhorn_violation)
        n_noise = negs.n_sinkhorn + (negs.n_permuted if negs.sinkhorn_fallback else 0)
        n_perm = len(negs) - n_noise
        M, _, n, m = negs.plans.shape
        if n_noise:
            audit.record("sinkhorn", M * n_noise, negs.sinkhorn_violation, SINKHORN_TOL)
        if n_perm:
            perm = negs.plans[:, n_noise:]
            err = max(np.abs(perm.sum(axis=3) - 1.0 / n).max(), np.abs(perm.sum(axis=2) - 1.0 / m).max())
            audit.record("permuted", M * n_perm, err, PLAN_TOL)
    # a Sinkhorn negative misses its marginals by `violation` in L1, so it can
    # undercut the optimum by about that mass (twice, rows and columns) times
    # the largest cost
    slack = 2.0 * violation * np.abs(C).max() + 1e-9
    worst = float((values[:, :1] - values[:, 1:]).max(initial=-np.inf))
    audit.ordering += values.shape[0]
    if worst > slack:
        raise FeasibilityError(f"a negative plan beats the optimal plan by {worst:.3g}")


def total_loss(task_loss, nc_value, coef):
    """``task_loss - coef * nc_value``; coef 0 returns ``task_loss`` itself."""
    if coef < 0:
        raise UsageError(f"nc_coef must be nonnegative, got {coef}")
    if coef == 0 or nc_value is None:
        return task_loss
    return gc.sub(task_loss, gc.scale(nc_value, coef))
