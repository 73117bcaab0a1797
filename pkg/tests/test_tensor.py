import numpy as np
import pytest

from eyenet import tensor as T
from eyenet.errors import InvalidArgument, NumericalError, ShapeError
from eyenet.tensor import Tensor


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)

    def test_hand_arithmetic(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_gradient(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng, 3, 4), Tensor(rng.normal(size=(4, 2)))
        assert T.finite_diff_check(lambda x: T.matmul(x, b), a) < 1e-6
        b = leaf(rng, 4, 2)
        assert T.finite_diff_check(lambda x: T.matmul(a, x), b) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestGatherScatter:
    def test_identity_gather(self):
        x = Tensor(np.arange(12.0).reshape(4, 3))
        np.testing.assert_array_equal(T.gather_rows(x, np.arange(4)).data, x.data)

    def test_scatter_inverts_gather(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(6, 2)))
        perm = rng.permutation(6)
        back = T.scatter_add_rows(Tensor(np.zeros((6, 2))), perm, T.gather_rows(x, perm))
        np.testing.assert_array_equal(back.data, x.data)

    def test_gather_gradient_with_repeats(self):
        rng = np.random.default_rng(2)
        x = leaf(rng, 5, 3)
        idx = np.array([[0, 1], [1, 1], [4, 2]])
        assert T.finite_diff_check(lambda t: T.gather_rows(t, idx) * T.gather_rows(t, idx), x) < 1e-6

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            T.gather_rows(Tensor(np.ones((3, 2))), [3])


class TestElementwise:
    def test_softmax_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_sigmoid_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        y = T.sigmoid(x)
        T.backward(T.sum(y))
        assert y.data[0] == 0.5
        assert x.grad[0] == 0.25

    def test_softmax_normalized_and_gradient(self):
        rng = np.random.default_rng(3)
        x = leaf(rng, 5, 8)
        w = Tensor(rng.normal(size=(5, 8)))
        for axis in (0, 1):
            np.testing.assert_allclose(T.softmax(x, axis).data.sum(axis=axis), 1.0, atol=1e-12)
            assert T.finite_diff_check(lambda t: T.softmax(t, axis) * w, x) < 1e-6

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(4, 6)) * 30)
        np.testing.assert_allclose(T.log_softmax(x).data, np.log(T.softmax(x).data), atol=1e-9)

    def test_relu_sigmoid_exp_log_gradients(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(0.2, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4)), requires_grad=True)
        for fn in (T.relu, T.sigmoid, T.exp):
            assert T.finite_diff_check(fn, x) < 1e-6
        pos = Tensor(np.abs(x.data), requires_grad=True)
        assert T.finite_diff_check(T.log, pos) < 1e-6

    def test_broadcast_row_and_column(self):
        rng = np.random.default_rng(6)
        x = leaf(rng, 4, 3)
        row, col = leaf(rng, 3), leaf(rng, 4, 1)
        assert T.finite_diff_check(lambda r: x * r + r, row) < 1e-6
        assert T.finite_diff_check(lambda c: x / (c * c + 1.0) - c, col) < 1e-6

    def test_bad_broadcast(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((4, 3))) + Tensor(np.ones((2, 3)))

    def test_non_finite_raises(self):
        with pytest.raises(NumericalError):
            T.log(Tensor([0.0]))

    def test_reductions_concat_split(self):
        rng = np.random.default_rng(7)
        x = leaf(rng, 4, 5)
        assert T.finite_diff_check(lambda t: T.mean(t, axis=0) * T.sum(t, axis=0), x) < 1e-6
        assert T.finite_diff_check(lambda t: T.concat(T.split(t, [2, 3], axis=-1)[::-1], axis=-1) * t, x) < 1e-6
        assert T.finite_diff_check(lambda t: T.reshape(t, (10, 2)) * T.reshape(t, (10, 2)), x) < 1e-6


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_half_square(self):
        x = Tensor(np.array([1.5, -2.0, 0.25]), requires_grad=True)
        T.backward(T.sum(x * x) * 0.5)
        np.testing.assert_array_equal(x.grad, x.data)

    def test_shared_subexpression_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        T.backward(T.sum(y + y * x))  # d/dx (x^2 + x^3) = 2x + 3x^2
        np.testing.assert_allclose(x.grad, [2 * 3 + 3 * 9])

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            T.backward(x * 2.0)

    def test_constant_loss(self):
        with pytest.raises(InvalidArgument):
            T.backward(T.sum(Tensor(np.ones(3))))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.parents == ()

    def test_deep_chain_does_not_recurse(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        T.backward(T.sum(y))
        assert x.grad[0] == 1.0


class TestFiniteDiffCheck:
    def test_sum_is_exact(self):
        rng = np.random.default_rng(8)
        assert T.finite_diff_check(T.sum, leaf(rng, 4, 3)) < 1e-10

    def test_sum_of_sigmoid(self):
        rng = np.random.default_rng(9)
        assert T.finite_diff_check(lambda t: T.sum(T.sigmoid(t)), leaf(rng, 6)) < 1e-7

    def test_wrong_backward_is_caught(self):
        def broken(x):
            def bw(g):
                return (-g * 0.5,)
            return T._result(np.sin(x.data), "broken", (x,), bw)

        rng = np.random.default_rng(10)
        assert T.finite_diff_check(broken, leaf(rng, 5)) > 1e-2

    def test_kink_safe_step_stays_on_one_side(self):
        x = Tensor([1e-5, -2e-5], requires_grad=True)
        numeric = T.numeric_gradient(T.relu, x, eps=1e-4, kink_safe=True)
        np.testing.assert_allclose(numeric, [1.0, 0.0], atol=1e-9)


class TestRegistry:
    def test_duplicate_name(self):
        reg = T.ParamRegistry()
        reg.add("w", np.zeros(2))
        with pytest.raises(InvalidArgument):
            reg.add("w", np.zeros(2))

    def test_unreached_params_get_zero_grad(self):
        reg = T.ParamRegistry()
        a, b = reg.add("a", np.ones(2)), reg.add("b", np.ones(3))
        T.backward(T.sum(a * 3.0), reg)
        np.testing.assert_array_equal(b.grad, np.zeros(3))

    def test_state_round_trip(self):
        reg = T.ParamRegistry()
        reg.add("a", np.arange(4.0))
        state = reg.state()
        reg["a"].data = np.zeros(4)
        reg.load_state(state)
        np.testing.assert_array_equal(reg["a"].data, np.arange(4.0))
        with pytest.raises(ShapeError):
            reg.load_state({"a": np.zeros(3)})
