"""Tests for the tape-based autograd in dpp_lib.tensor."""

import threading
from typing import Callable, Dict, List, Optional

import numpy as np
import pytest

from dpp_lib.tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add_bias,
    backward,
    conv2d,
    elementwise_mul,
    flatten,
    matmul,
    maxpool2x2,
    relu,
    softmax_cross_entropy,
    tensor_sum,
)
from tests.helpers import numerical_gradient, relative_error


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return tensor_sum(elementwise_mul(out, Tensor(weights)))


def _tape_gradients(
    fn: Callable[..., Tensor], *arrays: np.ndarray
) -> List[np.ndarray]:
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*tensors)
    tape.backward(loss)
    return [t.grad for t in tensors]


def _check_gradients(fn: Callable[..., Tensor], *arrays: np.ndarray) -> None:
    analytic = _tape_gradients(fn, *arrays)
    for index, array in enumerate(arrays):
        point = array.copy()

        def value(p: np.ndarray) -> float:
            operands = [Tensor(a) for a in arrays]
            operands[index] = Tensor(p)
            return float(fn(*operands).data)

        expected = numerical_gradient(value, point)
        assert relative_error(analytic[index], expected) < 1e-3


class TestGradients:
    """Analytic gradients against central finite differences."""

    def test_matmul_and_bias(self) -> None:
        """Test matmul and bias gradients."""
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(5, 3))
        b = rng.normal(size=3)
        upstream = rng.normal(size=(4, 3))

        _check_gradients(
            lambda x, w, b: _weighted_sum(add_bias(matmul(x, w), b), upstream),
            x,
            w,
            b,
        )

    def test_conv_pool_relu_stack(self) -> None:
        """Test gradients through conv, ReLU and pooling."""
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 2, 6, 6))
        w = rng.normal(size=(2, 3, 3, 3))
        upstream = rng.normal(size=(2, 3 * 2 * 2))

        def loss(x: Tensor, w: Tensor) -> Tensor:
            out = flatten(maxpool2x2(relu(conv2d(x, w))))
            return _weighted_sum(out, upstream)

        _check_gradients(loss, x, w)

    def test_strided_conv(self) -> None:
        """Test gradients of a strided convolution."""
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 1, 7, 7))
        w = rng.normal(size=(1, 3, 3, 2))
        upstream = rng.normal(size=(1, 2, 3, 3))

        _check_gradients(lambda x, w: _weighted_sum(conv2d(x, w, 2), upstream), x, w)

    def test_softmax_cross_entropy(self) -> None:
        """Test the cross-entropy gradient."""
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(5, 4))
        targets = np.eye(4)[[0, 3, 1, 1, 2]]

        _check_gradients(lambda z: softmax_cross_entropy(z, targets), logits)


class TestForward:
    def test_conv2d_matches_direct_loop(self) -> None:
        """Test conv2d against a direct loop."""
        # Arrange
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(2, 2, 2, 3))
        expected = np.zeros((1, 3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    expected[0, o, i, j] = np.sum(
                        x[0, :, i : i + 2, j : j + 2] * w[:, :, :, o]
                    )

        # Act
        out = conv2d(Tensor(x), Tensor(w))

        # Assert
        np.testing.assert_allclose(out.data, expected, rtol=1e-10)

    @pytest.mark.parametrize("a", [-2.5, 0.0, 3.0])
    def test_products_are_linear_in_the_input(self, a: float) -> None:
        """Test f(a x) = a f(x) for matmul and conv2d."""
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(3, 3, 3, 4))
        flat_x = x.reshape(2, -1)
        flat_w = rng.normal(size=(108, 5))

        conv = conv2d(Tensor(a * x), Tensor(w)).data
        dense = matmul(Tensor(a * flat_x), Tensor(flat_w)).data

        np.testing.assert_allclose(conv, a * conv2d(Tensor(x), Tensor(w)).data)
        np.testing.assert_allclose(
            dense, a * matmul(Tensor(flat_x), Tensor(flat_w)).data
        )

    def test_maxpool_picks_window_maximum(self) -> None:
        """Test that pooling keeps window maxima."""
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)

        out = maxpool2x2(Tensor(x))

        np.testing.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])

    def test_cross_entropy_of_uniform_logits_is_log_classes(self) -> None:
        """Test the cross-entropy of uniform logits."""
        loss = softmax_cross_entropy(Tensor(np.zeros((3, 10))), np.eye(10)[[1, 2, 3]])

        assert float(loss.data) == pytest.approx(np.log(10))

    def test_integer_data_becomes_float32(self) -> None:
        """Test the default dtype of integer data."""
        assert Tensor(np.arange(3)).dtype == np.float32


class TestTapeErrors:
    def test_tape_replays_once(self) -> None:
        """Test that a tape cannot be replayed twice."""
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(matmul(Tensor(np.ones((1, 2))), w))
        tape.backward(loss)

        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_unrecorded_loss(self) -> None:
        """Test backward on a value recorded by no tape."""
        loss = tensor_sum(Tensor(np.ones(3)))

        with pytest.raises(TapeError):
            backward(loss)

    def test_non_scalar_loss(self) -> None:
        """Test backward on a non-scalar output."""
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            out = matmul(Tensor(np.ones((1, 2))), w)

        with pytest.raises(TapeError):
            tape.backward(out)

    def test_gradients_accumulate_over_reuse(self) -> None:
        """Test gradient accumulation for a reused operand."""
        w = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(elementwise_mul(w, w))
        tape.backward(loss)

        np.testing.assert_allclose(w.grad, [4.0])


class TestShapeAndValueErrors:
    def test_matmul_mismatch(self) -> None:
        """Test matmul on incompatible shapes."""
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_conv_channel_mismatch(self) -> None:
        """Test conv2d with mismatched channels."""
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((3, 2, 2, 1))))

    def test_maxpool_odd_extent(self) -> None:
        """Test pooling an odd spatial extent."""
        with pytest.raises(ShapeError):
            maxpool2x2(Tensor(np.ones((1, 1, 3, 4))))

    def test_targets_must_be_one_hot(self) -> None:
        """Test targets that are not one-hot."""
        with pytest.raises(ShapeError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.full((2, 3), 0.5))

    def test_non_finite_logits(self) -> None:
        """Test that NaN logits are rejected."""
        logits = np.zeros((2, 3))
        logits[1, 2] = np.nan

        with pytest.raises(NonFiniteError):
            softmax_cross_entropy(Tensor(logits), np.eye(3)[[0, 1]])


class TestThreadIsolation:
    def test_each_thread_records_onto_its_own_tape(self) -> None:
        """Test that a tape entered in another thread does not capture operations."""
        a_entered = threading.Event()
        b_entered = threading.Event()
        a_done = threading.Event()
        w = Tensor(np.ones(3), requires_grad=True)
        entries: Dict[str, int] = {}

        def first() -> None:
            with Tape() as tape:
                a_entered.set()
                b_entered.wait(timeout=10)
                loss = tensor_sum(w)
            tape.backward(loss)
            entries["first"] = len(tape.entries)
            a_done.set()

        def second() -> None:
            a_entered.wait(timeout=10)
            with Tape() as tape:
                b_entered.set()
                a_done.wait(timeout=10)
            entries["second"] = len(tape.entries)

        threads = [threading.Thread(target=fn) for fn in (first, second)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join(timeout=30)

        assert entries == {"first": 1, "second": 0}
        np.testing.assert_array_equal(w.grad, np.ones(3))

    def test_other_threads_start_without_a_tape(self) -> None:
        """Test that an open tape is invisible to a new thread."""
        seen: List[Optional[Tape]] = []

        with Tape():
            thread = threading.Thread(target=lambda: seen.append(Tape.current()))
            thread.start()
            thread.join(timeout=10)

        assert seen == [None]
