"""Discrete optimal transport between uniform point clouds.

``emd_exact`` solves the transport linear program with a transportation
simplex (Bland's rule). Marginals are scaled to integers (row supply ``m``,
column demand ``n``) so every pivot is exact; plans are divided by ``n*m``
on return. ``sinkhorn_project`` only rescales a positive matrix onto the
coupling polytope and is used to build random feasible plans.
"""

from __future__ import annotations

import enum
import functools
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ProjectionError, ShapeError, SolverError, UsageError

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


class CostKind(enum.Enum):
    SQUARED_L2 = "SquaredL2"
    NEGATIVE_DOT = "NegativeDot"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"squaredl2": cls.SQUARED_L2, "l2": cls.SQUARED_L2,
                   "negativedot": cls.NEGATIVE_DOT, "dot": cls.NEGATIVE_DOT}
        try:
            return aliases[str(value).replace("_", "").replace("-", "").lower()]
        except KeyError:
            raise UsageError(f"unknown cost kind {value!r}") from None


@dataclass
class TransportPlan:
    matrix: np.ndarray
    value: float
    iterations: int = 0

    @property
    def shape(self):
        return self.matrix.shape


def as_cloud(points):
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"a point cloud is a non-empty n x d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError("point cloud has non-finite coordinates")
    return arr


def cost_matrix(X, Y, kind):
    """Pairwise ground cost ``C[i, j] = c(x_i, y_j)``."""
    X, Y = as_cloud(X), as_cloud(Y)
    kind = CostKind.parse(kind)
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"point dimensions differ: d={X.shape[1]} vs d={Y.shape[1]}")
    if kind is CostKind.NEGATIVE_DOT:
        return -(X @ Y.T)
    diff = X[:, None, :] - Y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def marginal_violation(T):
    """Largest L1 deviation of the row or column sums from uniform."""
    n, m = T.shape
    rows = np.abs(T.sum(axis=1) - 1.0 / n).sum()
    cols = np.abs(T.sum(axis=0) - 1.0 / m).sum()
    return float(max(rows, cols))


def is_feasible(T, tol):
    n, m = T.shape
    return bool(
        np.all(T >= -tol)
        and np.all(np.abs(T.sum(axis=1) - 1.0 / n) <= tol)
        and np.all(np.abs(T.sum(axis=0) - 1.0 / m) <= tol)
    )


# ------------------------------------------------------- transportation simplex


@njit(cache=True)
def _potentials(C, basic, u, v):
    n, m = C.shape
    u_set = np.zeros(n, dtype=np.bool_)
    v_set = np.zeros(m, dtype=np.bool_)
    stack = np.empty(n + m, dtype=np.int64)
    u[0] = 0.0
    u_set[0] = True
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        if node < n:
            for c in range(m):
                if basic[node, c] and not v_set[c]:
                    v[c] = C[node, c] - u[node]
                    v_set[c] = True
                    stack[top] = n + c
                    top += 1
        else:
            c = node - n
            for r in range(n):
                if basic[r, c] and not u_set[r]:
                    u[r] = C[r, c] - v[c]
                    u_set[r] = True
                    stack[top] = r
                    top += 1


@njit(cache=True)
def _cycle(basic, p, q, path_r, path_c):
    """Tree path from column ``q`` to row ``p``; returns its cell count."""
    n, m = basic.shape
    parent = np.full(n + m, -1, dtype=np.int64)
    seen = np.zeros(n + m, dtype=np.bool_)
    queue = np.empty(n + m, dtype=np.int64)
    queue[0] = p
    seen[p] = True
    head = 0
    tail = 1
    target = n + q
    while head < tail:
        node = queue[head]
        head += 1
        if node == target:
            break
        if node < n:
            for c in range(m):
                if basic[node, c] and not seen[n + c]:
                    seen[n + c] = True
                    parent[n + c] = node
                    queue[tail] = n + c
                    tail += 1
        else:
            c = node - n
            for r in range(n):
                if basic[r, c] and not seen[r]:
                    seen[r] = True
                    parent[r] = node
                    queue[tail] = r
                    tail += 1
    k = 0
    node = target
    while node != p:
        prev = parent[node]
        if node >= n:
            path_r[k] = prev
            path_c[k] = node - n
        else:
            path_r[k] = node
            path_c[k] = prev - n
        k += 1
        node = prev
    return k


@njit(cache=True)
def _find(root, a):
    while root[a] != a:
        root[a] = root[root[a]]
        a = root[a]
    return a


@njit(cache=True)
def _union(root, a, b):
    ra = _find(root, a)
    rb = _find(root, b)
    if ra != rb:
        root[ra] = rb


@njit(cache=True)
def _transport_simplex(C, tol, max_iter):
    n, m = C.shape
    x = np.zeros((n, m))
    basic = np.zeros((n, m), dtype=np.bool_)
    supply = np.full(n, float(m))
    demand = np.full(m, float(n))
    # least-cost greedy start; its support is a forest, completed to a
    # spanning tree with zero-valued cells
    order = np.argsort(C.ravel(), kind="mergesort")
    root = np.arange(n + m)
    for idx in order:
        i = idx // m
        j = idx % m
        if supply[i] > 0.0 and demand[j] > 0.0:
            q = min(supply[i], demand[j])
            x[i, j] = q
            basic[i, j] = True
            supply[i] -= q
            demand[j] -= q
            _union(root, i, n + j)
    for idx in order:
        i = idx // m
        j = idx % m
        if not basic[i, j] and _find(root, i) != _find(root, n + j):
            basic[i, j] = True
            _union(root, i, n + j)

    u = np.zeros(n)
    v = np.zeros(m)
    path_r = np.empty(n + m, dtype=np.int64)
    path_c = np.empty(n + m, dtype=np.int64)
    it = 0
    while True:
        _potentials(C, basic, u, v)
        p = -1
        q = -1
        for r in range(n):
            for c in range(m):
                if not basic[r, c] and C[r, c] - u[r] - v[c] < -tol:
                    p = r
                    q = c
                    break
            if p >= 0:
                break
        if p < 0:
            return x, it
        if it >= max_iter:
            return x, -1
        it += 1
        k = _cycle(basic, p, q, path_r, path_c)
        # cells alternate -, +, -, ... starting next to column q; the last is -
        theta = np.inf
        leave = -1
        for t in range(0, k, 2):
            r = path_r[t]
            c = path_c[t]
            idx = r * m + c
            if x[r, c] < theta or (x[r, c] == theta and idx < leave):
                theta = x[r, c]
                leave = idx
        for t in range(k):
            if t % 2 == 0:
                x[path_r[t], path_c[t]] -= theta
            else:
                x[path_r[t], path_c[t]] += theta
        x[p, q] += theta
        basic[leave // m, leave % m] = False
        basic[p, q] = True


def emd_exact(C):
    """Exact optimal transport between uniform marginals.

    Parameters
    ----------
    C : array-like, shape (n, m)
        Ground cost matrix.

    Returns
    -------
    TransportPlan
        A vertex of the coupling polytope (at most ``n + m - 1`` nonzeros)
        minimizing ``sum(T * C)`` with row sums ``1/n`` and column sums ``1/m``.
    """
    C = np.ascontiguousarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] < 1 or C.shape[1] < 1:
        raise ShapeError(f"cost matrix must be a non-empty 2-D array, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise SolverError("cost matrix has non-finite entries")
    n, m = C.shape
    tol = 1e-12 * (1.0 + float(np.abs(C).max()))
    x, iterations = _transport_simplex(C, tol, 100 * (n + m) * (n + m) + 1000)
    if iterations < 0:
        raise SolverError(f"transportation simplex did not terminate on a {n}x{m} problem")
    T = x / (n * m)
    return TransportPlan(T, float((T * C).sum()), iterations)


@njit(cache=True)
def _solve_blocks(C, offsets, n_blocks, width):
    P = np.zeros_like(C)
    for b in range(len(offsets) - 1):
        a0 = offsets[b]
        a1 = offsets[b + 1]
        n = a1 - a0
        for i in range(n_blocks):
            block = np.ascontiguousarray(C[a0:a1, i * width:(i + 1) * width])
            tol = 1e-12 * (1.0 + np.abs(block).max())
            x, it = _transport_simplex(block, tol, 100 * (n + width) * (n + width) + 1000)
            if it < 0:
                return P, b * n_blocks + i
            P[a0:a1, i * width:(i + 1) * width] = x / (n * width)
    return P, -1


def emd_blocks(C, offsets, width):
    """Solve every block of a stacked cost matrix exactly.

    ``C`` has one row per point of several stacked clouds (cloud ``b`` owns
    rows ``offsets[b]:offsets[b+1]``) and one column per point of several
    reference clouds of ``width`` points each. Each (row cloud, column cloud)
    block is solved as by :func:`emd_exact`; the normalized plans are
    returned in the same layout.
    """
    C = np.ascontiguousarray(C, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if C.shape[1] % width:
        raise ShapeError(f"{C.shape[1]} columns do not split into clouds of {width}")
    if offsets[0] != 0 or offsets[-1] != C.shape[0] or np.any(np.diff(offsets) < 1):
        raise ShapeError("row offsets must cover the rows with non-empty clouds")
    if not np.all(np.isfinite(C)):
        raise SolverError("cost matrix has non-finite entries")
    P, failed = _solve_blocks(C, offsets, C.shape[1] // width, width)
    if failed >= 0:
        raise SolverError(f"transportation simplex did not terminate on block {failed}")
    return P


def wasserstein(X, Y, kind):
    """Return ``(value, plan)`` of the transport discrepancy between two clouds."""
    C = cost_matrix(X, Y, kind)
    plan = emd_exact(C)
    return plan.value, plan


# ----------------------------------------------------------------- Sinkhorn


def sinkhorn_project(M, tol=1e-3, max_iter=50):
    """Alternate row/column rescaling of a positive matrix toward uniform marginals.

    ``M`` may be a single (n, m) matrix or a stack (k, n, m); the stack is
    iterated until every member meets ``tol``. Returns ``(T, violation,
    iterations)`` where ``violation`` is the largest L1 marginal error.
    """
    T = np.array(M, dtype=np.float64)
    if T.ndim not in (2, 3):
        raise ShapeError(f"expected an (n, m) or (k, n, m) array, got shape {T.shape}")
    if tol <= 0:
        raise UsageError("tol must be positive")
    if not np.all(T > 0) or not np.all(np.isfinite(T)):
        raise ProjectionError("Sinkhorn projection needs strictly positive finite entries")
    n, m = T.shape[-2:]

    def violation(A):
        rows = np.abs(A.sum(axis=-1) - 1.0 / n).sum(axis=-1)
        cols = np.abs(A.sum(axis=-2) - 1.0 / m).sum(axis=-1)
        return float(np.max(np.maximum(rows, cols)))

    err = violation(T)
    it = 0
    while err >= tol and it < max_iter:
        T *= (1.0 / n) / T.sum(axis=-1, keepdims=True)
        T *= (1.0 / m) / T.sum(axis=-2, keepdims=True)
        it += 1
        err = violation(T)
    return T, err, it


# ------------------------------------------------------------------ oracles

ORACLE_MAX_SIZE = 6


@functools.lru_cache(maxsize=None)
def _permutation_table(n):
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64)


@functools.lru_cache(maxsize=None)
def coupling_vertices(n, m):
    """All vertices of the uniform coupling polytope, as an array (k, n, m).

    Square shapes are the rescaled permutation matrices. Otherwise vertices are
    enumerated by leaf peeling: every vertex has a forest support, so some
    row or column meets it in one cell carrying ``min(supply, demand)``.
    Repeating that greedy assignment in every order reaches every basis.
    """
    if n > ORACLE_MAX_SIZE or m > ORACLE_MAX_SIZE:
        raise UsageError(f"oracle supports n, m <= {ORACLE_MAX_SIZE}, got {n}x{m}")
    if n == m:
        perms = _permutation_table(n)
        V = np.zeros((len(perms), n, n))
        V[np.arange(len(perms))[:, None], np.arange(n)[None, :], perms] = 1.0 / n
        return V

    @functools.lru_cache(maxsize=None)
    def peel(supply, demand):
        rows = [i for i in range(n) if supply[i]]
        if not rows:
            return frozenset([()])
        found = set()
        for i in rows:
            for j in range(m):
                if not demand[j]:
                    continue
                q = min(supply[i], demand[j])
                s = list(supply)
                d = list(demand)
                s[i] -= q
                d[j] -= q
                for rest in peel(tuple(s), tuple(d)):
                    found.add(tuple(sorted(rest + ((i, j, q),))))
        return frozenset(found)

    bases = sorted(peel((m,) * n, (n,) * m))
    V = np.zeros((len(bases), n, m))
    for k, cells in enumerate(bases):
        for i, j, q in cells:
            V[k, i, j] = q / (n * m)
    return V


def brute_force_oracle(C):
    """Exact optimum by exhaustive enumeration of coupling-polytope vertices."""
    C = np.asarray(C, dtype=np.float64)
    n, m = C.shape
    if n == m:
        if n > ORACLE_MAX_SIZE:
            raise UsageError(f"oracle supports n, m <= {ORACLE_MAX_SIZE}, got {n}x{m}")
        perms = _permutation_table(n)
        return float(C[np.arange(n), perms].sum(axis=1).min() / n)
    V = coupling_vertices(n, m)
    return float(np.einsum("kij,ij->k", V, C).min())


def optimal_vertices(C, atol=1e-9):
    """Vertices attaining the optimum within ``atol`` (uniqueness checks)."""
    C = np.asarray(C, dtype=np.float64)
    V = coupling_vertices(*C.shape)
    values = np.einsum("kij,ij->k", V, C)
    return V[values <= values.min() + atol]
