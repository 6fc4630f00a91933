import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from protocloud import otcore as ot
from protocloud.errors import ProjectionError, ShapeError, SolverError, UsageError

# four 2-point clouds built from u_i = (i // 2, i % 2)
U = np.array([[i // 2, i % 2] for i in range(4)], dtype=float)
CLOUDS = [np.array([U[0], U[1]]), np.array([U[0], U[2]]), np.array([U[0], U[3]]), np.array([U[1], U[2]])]
GRAM = np.array([[1, 0, 1, 1], [0, 1, 1, 1], [1, 1, 2, 1], [1, 1, 1, 2]], dtype=float)


def gram_matrix():
    G = np.zeros((4, 4))
    for a, b in itertools.product(range(4), repeat=2):
        value, _ = ot.wasserstein(CLOUDS[a], CLOUDS[b], ot.CostKind.NEGATIVE_DOT)
        G[a, b] = -2 * value  # per-point mass 1: n times the normalized dot value
    return G


def lp_value(C):
    n, m = C.shape
    A = np.vstack([np.kron(np.eye(n), np.ones(m)), np.kron(np.ones(n), np.eye(m))])
    b = np.r_[np.full(n, 1 / n), np.full(m, 1 / m)]
    return linprog(C.ravel(), A_eq=A, b_eq=b, bounds=(0, None), method="highs").fun


class TestCostMatrix:
    def test_single_pair(self):
        np.testing.assert_array_equal(ot.cost_matrix([[0, 0]], [[3, 4]], "SquaredL2"), [[25]])

    def test_zero_diagonal(self):
        X = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_allclose(np.diag(ot.cost_matrix(X, X, "SquaredL2")), 0, atol=1e-12)

    def test_l2_dot_identity(self):
        rng = np.random.default_rng(1)
        X, Y = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
        expected = (X ** 2).sum(1)[:, None] + (Y ** 2).sum(1)[None, :] + 2 * ot.cost_matrix(X, Y, "NegativeDot")
        np.testing.assert_allclose(ot.cost_matrix(X, Y, "SquaredL2"), expected, atol=1e-12)

    def test_dimension_mismatch_names_both(self):
        with pytest.raises(ShapeError, match="d=2.*d=3"):
            ot.cost_matrix(np.ones((2, 2)), np.ones((2, 3)), "SquaredL2")

    def test_unknown_kind(self):
        with pytest.raises(UsageError):
            ot.CostKind.parse("cosine")


class TestEmdExact:
    def test_identical_clouds(self):
        X = np.random.default_rng(2).normal(size=(5, 2))
        plan = ot.emd_exact(ot.cost_matrix(X, X, "SquaredL2"))
        assert plan.value == pytest.approx(0, abs=1e-12)
        np.testing.assert_allclose(plan.matrix, np.eye(5) / 5)

    def test_gram_matrix_of_two_point_clouds(self):
        G = gram_matrix()
        np.testing.assert_allclose(G, GRAM, atol=1e-9)
        assert np.linalg.det(G) == pytest.approx(-1.0, abs=1e-9)
        # with normalized masses every entry halves
        assert np.linalg.det(G / 2) == pytest.approx(-1 / 16, abs=1e-9)
        assert np.linalg.eigvalsh(G).min() < 0

    def test_rectangular_against_vertex_enumeration(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            C = rng.normal(size=(3, 5))
            assert abs(ot.emd_exact(C).value - ot.brute_force_oracle(C)) < 1e-8

    def test_square_against_permutations(self):
        rng = np.random.default_rng(4)
        for n in range(1, 7):
            C = rng.normal(size=(n, n))
            best = min(C[np.arange(n), p].sum() for p in itertools.permutations(range(n))) / n
            assert abs(ot.emd_exact(C).value - best) < 1e-8

    def test_against_linear_programming(self):
        rng = np.random.default_rng(5)
        for n, m in [(7, 11), (13, 10), (20, 10), (1, 9), (9, 1)]:
            C = rng.uniform(0, 5, size=(n, m))
            assert abs(ot.emd_exact(C).value - lp_value(C)) < 1e-8

    def test_vertex_support_size(self):
        rng = np.random.default_rng(6)
        for n, m in [(4, 7), (10, 10), (13, 10)]:
            T = ot.emd_exact(rng.normal(size=(n, m))).matrix
            assert (T > 1e-15).sum() <= n + m - 1
            assert ot.is_feasible(T, 1e-12)

    def test_degenerate_integer_costs(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n, m = rng.integers(1, 6, size=2)
            C = rng.integers(0, 3, size=(n, m)).astype(float)
            plan = ot.emd_exact(C)
            assert abs(plan.value - ot.brute_force_oracle(C)) < 1e-9
            assert ot.is_feasible(plan.matrix, 1e-12)

    def test_non_finite_cost(self):
        with pytest.raises(SolverError):
            ot.emd_exact([[0.0, np.inf]])


class TestEmdBlocks:
    def test_matches_per_block_solver(self):
        rng = np.random.default_rng(8)
        offsets = np.array([0, 3, 4, 9])
        C = rng.normal(size=(9, 8))
        P = ot.emd_blocks(C, offsets, 4)
        for a, b in zip(offsets[:-1], offsets[1:]):
            for i in range(2):
                block = C[a:b, 4 * i:4 * i + 4]
                np.testing.assert_array_equal(P[a:b, 4 * i:4 * i + 4], ot.emd_exact(block).matrix)

    def test_rejects_bad_layout(self):
        with pytest.raises(ShapeError):
            ot.emd_blocks(np.zeros((4, 6)), [0, 4], 4)
        with pytest.raises(ShapeError):
            ot.emd_blocks(np.zeros((4, 4)), [0, 2, 2, 4], 4)


class TestSinkhorn:
    def test_all_ones(self):
        T, err, it = ot.sinkhorn_project(np.ones((2, 3)))
        np.testing.assert_allclose(T, np.full((2, 3), 1 / 6))
        assert err == pytest.approx(0, abs=1e-15)
        assert it == 1

    def test_feasible_input_is_fixed_point(self):
        T0 = np.array([[0.3, 0.2], [0.2, 0.3]])
        T, err, it = ot.sinkhorn_project(T0)
        np.testing.assert_array_equal(T, T0)
        assert it == 0

    def test_random_matrices_converge(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            T, err, it = ot.sinkhorn_project(rng.uniform(0, 10, size=(4, 4)) + 1e-12, tol=1e-3, max_iter=50)
            assert err < 1e-3 and it <= 50

    def test_stack(self):
        rng = np.random.default_rng(10)
        T, err, _ = ot.sinkhorn_project(rng.uniform(0.1, 10, size=(7, 3, 5)))
        assert T.shape == (7, 3, 5) and err < 1e-3

    def test_rejects_nonpositive(self):
        with pytest.raises(ProjectionError):
            ot.sinkhorn_project([[1.0, 0.0], [1.0, 1.0]])

    def test_rejects_bad_tolerance(self):
        with pytest.raises(UsageError):
            ot.sinkhorn_project(np.ones((2, 2)), tol=0)


class TestWasserstein:
    def test_self_distance(self):
        X = np.random.default_rng(11).normal(size=(6, 3))
        assert ot.wasserstein(X, X, "SquaredL2")[0] == pytest.approx(0, abs=1e-12)

    def test_forced_plan(self):
        value, plan = ot.wasserstein([[0, 0]], [[1, 0], [0, 1]], "SquaredL2")
        np.testing.assert_allclose(plan.matrix, [[0.5, 0.5]])
        assert value == pytest.approx(1.0)


class TestOracle:
    def test_trivial(self):
        assert ot.brute_force_oracle([[3.5]]) == 3.5
        assert ot.brute_force_oracle(np.full((3, 3), 2.0)) == pytest.approx(2.0)

    def test_size_cap(self):
        with pytest.raises(UsageError):
            ot.brute_force_oracle(np.zeros((7, 7)))
        with pytest.raises(UsageError):
            ot.brute_force_oracle(np.zeros((3, 7)))

    def test_vertices_are_feasible_and_distinct(self):
        V = ot.coupling_vertices(3, 4)
        assert all(ot.is_feasible(T, 1e-12) for T in V)
        assert len({tuple(np.round(T.ravel() * 12).astype(int)) for T in V}) == len(V)

    def test_vertex_count_matches_linear_programming(self):
        # every LP optimum of random costs must be one of the enumerated vertices
        rng = np.random.default_rng(12)
        V = ot.coupling_vertices(3, 5)
        for _ in range(30):
            C = rng.normal(size=(3, 5))
            assert abs(np.einsum("kij,ij->k", V, C).min() - lp_value(C)) < 1e-9


def random_cloud_pair(rng, n, m, d=2):
    return rng.normal(size=(n, d)), rng.normal(size=(m, d))


class TestInvariants:
    def test_optimality_against_random_feasible_plans(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            n, m = rng.integers(2, 8, size=2)
            C = rng.normal(size=(n, m))
            value = ot.emd_exact(C).value
            T, err, _ = ot.sinkhorn_project(rng.uniform(0.01, 10, size=(1000, n, m)), tol=1e-9, max_iter=10000)
            assert err < 1e-9
            assert value <= np.einsum("kij,ij->k", T, C).min() + 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
    def test_symmetry(self, n, m, seed):
        X, Y = random_cloud_pair(np.random.default_rng(seed), n, m)
        for kind in ot.CostKind:
            a, pa = ot.wasserstein(X, Y, kind)
            b, pb = ot.wasserstein(Y, X, kind)
            assert abs(a - b) < 1e-8

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
    def test_feasibility(self, n, m, seed):
        C = np.random.default_rng(seed).normal(size=(n, m))
        T = ot.emd_exact(C).matrix
        assert ot.is_feasible(T, 1e-6)
        assert T.min() >= 0 and T.max() <= 1

    def test_cost_kind_plan_equivalence(self):
        rng = np.random.default_rng(14)
        checked = 0
        while checked < 30:
            n, m = rng.integers(2, 5, size=2)
            X, Y = random_cloud_pair(rng, n, m, d=3)
            C2 = ot.cost_matrix(X, Y, "SquaredL2")
            if len(ot.optimal_vertices(C2)) != 1:
                continue
            l2, p2 = ot.wasserstein(X, Y, "SquaredL2")
            dot, pd = ot.wasserstein(X, Y, "NegativeDot")
            np.testing.assert_array_equal(p2.matrix, pd.matrix)
            const = (X ** 2).sum() / n + (Y ** 2).sum() / m
            assert abs(l2 - (const + 2 * dot)) < 1e-8
            checked += 1
