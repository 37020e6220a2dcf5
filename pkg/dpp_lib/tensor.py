"""Dense tensors with tape-based reverse-mode differentiation.

This module provides the small set of array operations needed to train
LeNet300-100 and LeNet5-Caffe: matrix products, valid convolutions, ReLU,
2x2 max pooling, bias addition, element-wise products and a mean softmax
cross-entropy. Every operation executed while a `Tape` is active and whose
operands require gradients is recorded; `backward()` replays the tape once,
in reverse.

Typical usage:
    from dpp_lib.tensor import Tape, Tensor, backward, matmul, softmax_cross_entropy

    w = Tensor(np.zeros((784, 10), dtype=np.float32), requires_grad=True)
    with Tape():
        loss = softmax_cross_entropy(matmul(x, w), targets)
    backward(loss)
    print(w.grad)
"""

import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


class ShapeError(Exception):
    """Raised when operand shapes are incompatible with an operation."""

    pass


class TapeError(Exception):
    """Raised when the recorded tape cannot be replayed."""

    pass


class NonFiniteError(Exception):
    """Raised when an operation receives NaN or infinite values."""

    pass


class Tensor:
    """A dense n-dimensional array with an optional gradient buffer."""

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        """Reset the gradient buffer to zeros of the data's shape."""
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Back-propagate from this scalar through its recording tape."""
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


_local = threading.local()


def _active_tapes() -> List["Tape"]:
    stack: Optional[List["Tape"]] = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeEntry:
    """One recorded operation."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn


class Tape:
    """Ordered record of executed operations.

    Tapes are activated as context managers and may be nested; operations
    record onto the innermost tape active in the calling thread. A tape can
    be replayed once.
    """

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc_info: Any) -> None:
        _active_tapes().remove(self)

    @classmethod
    def current(cls) -> Optional["Tape"]:
        """Return the innermost tape active in this thread, if any."""
        stack = _active_tapes()
        return stack[-1] if stack else None

    def record(self, entry: TapeEntry) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that was already replayed")
        self.entries.append(entry)
        entry.output._tape = self

    def backward(self, loss: Tensor) -> None:
        """Replay the tape in reverse, accumulating gradients into operands.

        Args:
            loss: Scalar tensor produced by an operation on this tape

        Raises:
            TapeError: If the tape was already replayed or `loss` is not scalar
        """
        if self.consumed:
            raise TapeError("tape was already replayed; record a new forward pass")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self.entries):
            upstream = entry.output.grad
            if upstream is None:
                continue
            input_grads = entry.backward_fn(upstream)
            for operand, grad in zip(entry.inputs, input_grads):
                if grad is None or not operand.requires_grad:
                    continue
                grad = np.asarray(grad, dtype=operand.dtype).reshape(operand.shape)
                if operand.grad is None:
                    operand.grad = grad.copy()
                else:
                    operand.grad = operand.grad + grad
        logger.debug("replayed %d tape entries", len(self.entries))


def backward(loss: Tensor) -> None:
    """Compute dL/dparam for every parameter reachable from `loss`.

    Raises:
        TapeError: If `loss` was not produced by recorded operations or its
            tape was already replayed
    """
    if loss._tape is None:
        raise TapeError("loss was not produced by recorded operations")
    loss._tape.backward(loss)


def apply_op(
    op: str,
    inputs: Sequence[Tensor],
    data: np.ndarray,
    backward_fn: BackwardFn,
) -> Tensor:
    """Wrap a forward result and record it on the active tape when needed.

    This is the extension point used by the masking, quantization and
    penalty operations that live outside this module.
    """
    tape = Tape.current()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad and tape is not None:
        tape.record(TapeEntry(op, tuple(inputs), out, backward_fn))
    return out


def _check_finite(array: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{op} received non-finite values")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of `a` (m x k) and `b` (k x n)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul cannot combine {a.shape} and {b.shape}")
    a_data, b_data = a.data, b.data

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return g @ b_data.T, a_data.T @ g

    return apply_op("matmul", (a, b), a_data @ b_data, _backward)


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation.

    Args:
        x: Input of shape (batch, cin, h, w)
        w: Kernels of shape (cin, kh, kw, cout)
        stride: Positive step between windows

    Returns:
        Tensor of shape (batch, cout, h', w') with h' = (h - kh) / stride + 1
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d operands, got {x.shape} and {w.shape}")
    batch, cin, height, width = x.shape
    w_cin, kh, kw, _ = w.shape
    if cin != w_cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernels {w_cin}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be positive, got {stride}")
    if kh > height or kw > width:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {height}x{width}")
    if (height - kh) % stride or (width - kw) % stride:
        raise ShapeError(
            f"stride {stride} does not tile a {height}x{width} input "
            f"with a {kh}x{kw} kernel"
        )
    out_h = (height - kh) // stride + 1
    out_w = (width - kw) // stride + 1

    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[
        :, :, ::stride, ::stride
    ]
    w_data = w.data
    out = np.tensordot(windows, w_data, axes=([1, 4, 5], [0, 1, 2]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_w = np.tensordot(windows, g, axes=([0, 2, 3], [0, 2, 3]))
        grad_windows = np.tensordot(g, w_data, axes=([1], [3]))
        grad_x = np.zeros((batch, cin, height, width), dtype=g.dtype)
        row_end = stride * (out_h - 1) + 1
        col_end = stride * (out_w - 1) + 1
        for i in range(kh):
            for j in range(kw):
                grad_x[:, :, i : i + row_end : stride, j : j + col_end : stride] += (
                    grad_windows[..., i, j].transpose(0, 3, 1, 2)
                )
        return grad_x, grad_w

    return apply_op("conv2d", (x, w), out, _backward)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * active,)

    out = np.where(active, x.data, 0).astype(x.dtype)
    return apply_op("relu", (x,), out, _backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over the last two axes of (b, c, h, w)."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {x.shape}")
    batch, channels, height, width = x.shape
    half_h, half_w = height // 2, width // 2
    windows = (
        x.data.reshape(batch, channels, half_h, 2, half_w, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(batch, channels, half_h, half_w, 4)
    )
    winners = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, winners, axis=-1)[..., 0]

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad_windows = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(grad_windows, winners, g[..., None], axis=-1)
        grad_x = (
            grad_windows.reshape(batch, channels, half_h, half_w, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(batch, channels, height, width)
        )
        return (grad_x,)

    return apply_op("maxpool2x2", (x,), out, _backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1 of a (b, n) or (b, n, h, w) input."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias of shape {b.shape} does not fit input {x.shape}")
    view = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    reduce_axes = tuple(axis for axis in range(x.ndim) if axis != 1)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return g, g.sum(axis=reduce_axes)

    return apply_op("add_bias", (x, b), x.data + b.data.reshape(view), _backward)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul shape mismatch: {a.shape} vs {b.shape}")
    a_data, b_data = a.data, b.data

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return g * b_data, g * a_data

    return apply_op("elementwise_mul", (a, b), a_data * b_data, _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def _backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return g, g

    return apply_op("add", (a, b), a.data + b.data, _backward)


def scale(x: Tensor, factor: Any) -> Tensor:
    """Multiply by a constant scalar."""
    factor = x.dtype.type(factor)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * factor,)

    return apply_op("scale", (x,), x.data * factor, _backward)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    shape = x.shape

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype), _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    source_shape = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {source_shape} to {tuple(shape)}") from e

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.reshape(source_shape),)

    return apply_op("reshape", (x,), out, _backward)


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Expand singleton axes; the backward pass sums over the expanded axes."""
    target = tuple(shape)
    source_shape = x.shape
    try:
        out = np.broadcast_to(x.data, target).copy()
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {source_shape} to {target}") from e

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (_unbroadcast(g, source_shape),)

    return apply_op("broadcast_to", (x,), out, _backward)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits) and one-hot `targets`."""
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != logits.shape:
        raise ShapeError(
            f"targets of shape {targets.shape} do not match logits {logits.shape}"
        )
    if not np.all((targets == 0) | (targets == 1)) or not np.all(
        targets.sum(axis=1) == 1
    ):
        raise ShapeError("targets must be one-hot rows")
    _check_finite(logits.data, "softmax_cross_entropy")
    batch = logits.shape[0]
    log_probs = log_softmax(logits.data, axis=1)
    loss = -(targets * log_probs).sum() / batch
    probs = np.exp(log_probs)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return ((probs - targets) * (g / batch),)

    return apply_op(
        "softmax_cross_entropy",
        (logits,),
        np.asarray(loss, dtype=logits.dtype),
        _backward,
    )
