import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import check_grad
from uxsep import tensor as T
from uxsep.tensor import Tape, Tensor, tensor_create


class TestCreate:
    def test_zeros(self):
        t = tensor_create([2, 3], "zeros")
        assert t.shape == (2, 3)
        assert np.all(t.data == 0.0)

    def test_constant(self):
        t = tensor_create([1], "constant", value=5)
        assert t.data.tolist() == [5.0]

    def test_uniform_seed_repeatable(self):
        a = tensor_create([4], "uniform", low=-1, high=1, rng=np.random.default_rng(7))
        b = tensor_create([4], "uniform", low=-1, high=1, rng=np.random.default_rng(7))
        np.testing.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("shape", [[0], [2, 0], [-1, 3]])
    def test_bad_extents(self, shape):
        with pytest.raises(ValueError):
            tensor_create(shape, "zeros")


class TestMatmul:
    def test_identity(self):
        b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = Tensor(np.eye(2, dtype=np.float32)) @ b
        np.testing.assert_allclose(out.data, b.data)

    def test_hand_expansion(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[5.0], [6.0]]))
        np.testing.assert_allclose((a @ b).data, [[17.0], [39.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(0)
        b = Tensor(rng.normal(size=(3, 2)), dtype=np.float64)
        err = check_grad(lambda a: T.sum_(a @ b), rng.normal(size=(2, 3)), tol=1e-6)
        assert err < 1e-6


class TestElementwise:
    def test_hadamard_identity_mask(self):
        a = Tensor(np.array([1.0, -2.0, 3.0]))
        out = T.elementwise("hadamard", a, Tensor(np.ones(3, dtype=np.float32)))
        np.testing.assert_allclose(out.data, a.data)

    def test_selector_mask(self):
        out = T.hadamard(Tensor(np.array([1.0, 2.0, 3.0])), Tensor(np.array([0.0, 1.0, 0.0])))
        np.testing.assert_allclose(out.data, [0.0, 2.0, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_scalar_broadcast_allowed(self):
        out = Tensor(np.array([1.0, 2.0])) * 2.0
        np.testing.assert_allclose(out.data, [2.0, 4.0])

    def test_hadamard_grad_is_other_factor(self):
        rng = np.random.default_rng(1)
        b = rng.normal(size=(4,))
        bt = Tensor(b, dtype=np.float64)
        check_grad(lambda a: T.sum_(a * bt), rng.normal(size=(4,)), tol=1e-6)


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.random.default_rng(2).normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(x)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, np.ones((2, 3)))

    def test_square_sum_grad(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(x * x)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * x
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_backward_without_tape_rejected(self):
        x = Tensor(np.ones(1), requires_grad=True)
        tape = Tape()
        with pytest.raises(ValueError):
            tape.backward(x)

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(x * x)
        tape.backward(loss)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_backward_linearity(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(5,))
        a, b = 1.7, -0.4

        def grads(weights):
            x = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
            with Tape() as tape:
                l1 = T.sum_(x * x)
                l2 = T.sum_(T.sigmoid(x))
                loss = weights[0] * l1 + weights[1] * l2
            tape.backward(loss)
            return x.grad.copy()

        combined = grads((a, b))
        split = a * grads((1.0, 0.0)) + b * grads((0.0, 1.0))
        np.testing.assert_allclose(combined, split, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 31 - 1))
def test_composite_op_gradients_match_fd(n, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.5, 2.0, size=(n,))
    w = Tensor(rng.normal(size=(n, n)), dtype=np.float64)

    def loss(x):
        h = T.tanh(T.reshape(x, (1, n)) @ w)
        y = T.sum_(T.sqrt(T.exp(h) + 1.0) * T.relu(T.reshape(x, (1, n))))
        return y + T.sum_(T.log(x) * 0.1) + T.sum_(T.cumsum(x, 0) ** 2) * 0.01

    check_grad(loss, x0, tol=1e-4)


def test_determinism_same_seed_same_ops():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor.uniform((8, 8), -1, 1, rng)
        y = T.sigmoid(x @ x) * x
        return y.data

    np.testing.assert_array_equal(run(), run())


def test_no_grad_suppresses_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        with T.no_grad():
            _ = x * x
        assert len(tape) == 0
        loss = T.sum_(x * x)
    assert len(tape) > 0
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 2.0])
