import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protocloud import gradcore as gc
from protocloud.errors import ConfigError, ShapeError, TrainingError, UsageError

from conftest import numeric_grad, rel_err


def grad_of(build, *arrays):
    """Reverse-mode and finite-difference gradients of ``build(*tensors)``."""
    params = [gc.parameter(a, f"p{k}") for k, a in enumerate(arrays)]
    loss = build(*params)
    grads = gc.backward(loss, params)
    numeric = [numeric_grad(lambda: build(*params).item(), p.data) for p in params]
    return [grads[p.name] for p in params], numeric


class TestMatmul:
    def test_hand_product(self):
        out = gc.matmul(gc.constant([[1, 2], [3, 4]]), gc.constant([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_identity(self):
        A = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(gc.matmul(gc.constant(A), gc.constant(np.eye(4))).data, A)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            gc.matmul(gc.constant(np.ones((2, 3))), gc.constant(np.ones((2, 3))))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        exact, numeric = grad_of(lambda a, b: gc.tsum(gc.matmul(a, b)), rng.normal(size=(3, 4)),
                                 rng.normal(size=(4, 2)))
        for e, n in zip(exact, numeric):
            assert rel_err(e, n) < 1e-6


class TestElementwise:
    def test_relu_values_and_idempotence(self):
        x = gc.constant([[-1.0, 2.0]])
        np.testing.assert_array_equal(gc.relu(x).data, [[0.0, 2.0]])
        np.testing.assert_array_equal(gc.relu(gc.relu(x)).data, gc.relu(x).data)

    def test_relu_gradient_mask(self):
        x = gc.parameter([[-1.0, 2.0]], "x")
        np.testing.assert_array_equal(gc.backward(gc.tsum(gc.relu(x)), [x])["x"], [[0.0, 1.0]])

    def test_relu_subgradient_zero_at_kink(self):
        x = gc.parameter([[0.0]], "x")
        assert gc.backward(gc.tsum(gc.relu(x)), [x])["x"][0, 0] == 0.0

    def test_concat(self):
        out = gc.concat(gc.constant([[1.0, 2.0]]), gc.constant([[3.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3]])
        x = gc.constant([[1.0, 2.0]])
        np.testing.assert_array_equal(gc.concat(x, gc.constant(np.zeros((1, 0)))).data, x.data)

    def test_concat_backward_splits(self):
        a, b = gc.parameter(np.ones((2, 2)), "a"), gc.parameter(np.ones((2, 3)), "b")
        g = gc.backward(gc.tsum(gc.concat(a, b)), [a, b])
        np.testing.assert_array_equal(g["a"], np.ones((2, 2)))
        np.testing.assert_array_equal(g["b"], np.ones((2, 3)))

    def test_concat_row_mismatch(self):
        with pytest.raises(ShapeError):
            gc.concat(gc.constant(np.ones((2, 1))), gc.constant(np.ones((3, 1))))

    def test_sigmoid_and_log_sum_exp(self):
        assert gc.sigmoid(gc.constant(0.0)).item() == 0.5
        assert gc.log_sum_exp(gc.constant([[0.0, 0.0]])).item() == pytest.approx(np.log(2), abs=1e-12)

    def test_log_sum_exp_is_stable(self):
        out = gc.log_sum_exp(gc.constant([[1000.0, 1000.0]]), axis=1)
        assert out.item() == pytest.approx(1000 + np.log(2))

    def test_dropout_zero_is_identity(self):
        x = gc.constant(np.arange(6.0).reshape(2, 3))
        rng = np.random.default_rng(0)
        assert gc.dropout(x, 0.0, True, rng) is x
        assert gc.dropout(x, 0.5, False, rng) is x

    def test_dropout_rescales_survivors(self):
        x = gc.constant(np.ones((200, 50)))
        out = gc.dropout(x, 0.2, True, np.random.default_rng(0)).data
        assert set(np.unique(out)) <= {0.0, 1.25}
        assert abs((out == 0).mean() - 0.2) < 0.01

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_dropout_rejects_bad_probability(self, p):
        with pytest.raises(ConfigError):
            gc.dropout(gc.constant(1.0), p, True, np.random.default_rng(0))

    def test_composite_gradients(self):
        rng = np.random.default_rng(2)

        def build(a, b, w):
            h = gc.sigmoid(gc.add_row(gc.matmul(a, w), b))
            z = gc.concat(h, gc.scale(a, 0.5))
            return gc.sub(gc.tsum(gc.log_sum_exp(z, axis=1)), gc.mean(gc.mul(z, z)))

        exact, numeric = grad_of(build, rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (1, 2)),
                                 rng.uniform(-1, 1, (3, 2)))
        for e, n in zip(exact, numeric):
            assert rel_err(e, n) < 1e-4

    def test_gather_sum_gradient(self):
        rng = np.random.default_rng(3)
        table = gc.SumTable([[0, 2], [1, -1], [2, 0], [-1, -1]], 3)
        exact, numeric = grad_of(lambda x: gc.tsum(gc.mul(gc.gather_sum(x, table), gc.gather_sum(x, table))),
                                 rng.normal(size=(3, 2)))
        assert rel_err(exact[0], numeric[0]) < 1e-6

    def test_gather_sum_padding_row_is_zero(self):
        x = gc.constant(np.ones((2, 3)))
        out = gc.gather_sum(x, gc.SumTable([[-1], [0]], 2)).data
        np.testing.assert_array_equal(out, [[0, 0, 0], [1, 1, 1]])


@st.composite
def small_matrices(draw):
    r = draw(st.integers(1, 4))
    c = draw(st.integers(1, 4))
    elems = st.floats(-1, 1, allow_nan=False)
    return draw(arrays(np.float64, (r, c), elements=elems)), draw(arrays(np.float64, (c, r), elements=elems))


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(small_matrices())
    def test_finite_difference_agreement(self, ab):
        a, b = ab

        def build(x, y):
            return gc.tsum(gc.sigmoid(gc.matmul(x, y)))

        exact, numeric = grad_of(build, a, b)
        for e, n in zip(exact, numeric):
            assert np.abs(e - n).max() < 1e-4 * max(1.0, np.abs(n).max())

    @settings(max_examples=30, deadline=None)
    @given(small_matrices())
    def test_backward_is_linear_in_upstream(self, ab):
        a, b = ab
        x = gc.parameter(a, "x")
        out = gc.relu(gc.matmul(x, gc.constant(b)))
        seed = np.random.default_rng(0).normal(size=out.shape)
        g1 = gc.Tape(out).backward(seed)[x._id]
        g2 = gc.Tape(out).backward(2 * seed)[x._id]
        np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12, atol=1e-300)

    def test_replay_is_deterministic(self):
        def run():
            rng = np.random.default_rng(7)
            w = gc.parameter(rng.normal(size=(3, 3)), "w")
            x = gc.constant(rng.normal(size=(5, 3)))
            loss = gc.tsum(gc.dropout(gc.relu(gc.matmul(x, w)), 0.3, True, rng))
            return loss.item(), gc.backward(loss, [w])["w"]

        (v1, g1), (v2, g2) = run(), run()
        assert v1 == v2
        np.testing.assert_array_equal(g1, g2)


class TestBackward:
    def test_outer_product_structure(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 1))
        exact, numeric = grad_of(lambda w: gc.tsum(gc.matmul(w, gc.constant(x))), rng.normal(size=(2, 3)))
        np.testing.assert_allclose(exact[0], np.ones((2, 1)) @ x.T)
        assert rel_err(exact[0], numeric[0]) < 1e-6

    def test_unreachable_parameter_gets_zeros(self):
        a, b = gc.parameter([[1.0]], "a"), gc.parameter(np.ones((2, 2)), "b")
        g = gc.backward(gc.scale(a, 3.0), [a, b])
        np.testing.assert_array_equal(g["b"], np.zeros((2, 2)))

    def test_loss_wrt_itself(self):
        loss = gc.parameter([[5.0]], "loss")
        assert gc.backward(loss, [loss])["loss"][0, 0] == 1.0

    def test_non_scalar_loss(self):
        with pytest.raises(UsageError):
            gc.backward(gc.parameter(np.ones((2, 1)), "x"), [])


class TestAdam:
    def test_one_step(self):
        p = gc.parameter([[1.0]], "p")
        state = gc.AdamState.for_groups({"main": ([p], 0.1)})
        gc.adam_step([p], {"p": np.array([[1.0]])}, state)
        assert p.data[0, 0] == pytest.approx(0.9, abs=1e-6)
        assert state.step == 1

    def test_zero_gradient(self):
        p = gc.parameter([[1.0]], "p")
        state = gc.AdamState.for_groups({"main": ([p], 0.1)})
        gc.adam_step([p], {"p": np.zeros((1, 1))}, state)
        assert p.data[0, 0] == 1.0
        assert state.step == 1

    def test_zero_lr_group_is_bit_identical(self):
        rng = np.random.default_rng(5)
        a, b = gc.parameter(rng.normal(size=(2, 2)), "a"), gc.parameter(rng.normal(size=(2, 2)), "b")
        before = a.data.copy()
        state = gc.AdamState.for_groups({"frozen": ([a], 0.0), "main": ([b], 0.1)})
        for _ in range(3):
            gc.adam_step([a, b], {"a": np.ones((2, 2)), "b": np.ones((2, 2))}, state)
        np.testing.assert_array_equal(a.data, before)
        assert state.m["a"].shape == a.shape
        assert state.step == 3

    def test_non_finite_gradient_names_parameter(self):
        p = gc.parameter([[1.0]], "proto")
        state = gc.AdamState.for_groups({"main": ([p], 0.1)})
        with pytest.raises(TrainingError, match="proto"):
            gc.adam_step([p], {"proto": np.array([[np.nan]])}, state)

    def test_duplicate_parameter_rejected(self):
        p = gc.parameter([[1.0]], "p")
        with pytest.raises(ConfigError):
            gc.AdamState.for_groups({"a": ([p], 0.1), "b": ([p], 0.1)})
