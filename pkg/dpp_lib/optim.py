"""First-order optimizers for the training loop.

Two update rules are supported: Adam (used for the MNIST runs) and SGD with
momentum. State lives in an `OptimizerState` whose moment buffers mirror the
shapes of the parameters they belong to.

Typical usage:
    from dpp_lib.optim import init_optimizer, optimizer_step, zero_grad

    state = init_optimizer("adam", params, lr=0.001)
    zero_grad(params)
    ...  # forward + backward
    optimizer_step(params, [p.grad for p in params], state)
"""

from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np

from dpp_lib.tensor import ShapeError, Tensor

OptimizerName = Literal["adam", "sgd"]

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
SGD_MOMENTUM = 0.9


@dataclass
class OptimizerState:
    """Per-parameter moment buffers plus the update hyperparameters."""

    name: OptimizerName
    lr: float
    betas: Tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS
    momentum: float = SGD_MOMENTUM
    step_count: int = 0
    first_moments: List[np.ndarray] = field(default_factory=list)
    second_moments: List[np.ndarray] = field(default_factory=list)
    velocities: List[np.ndarray] = field(default_factory=list)


def init_optimizer(
    name: OptimizerName,
    params: Sequence[Tensor],
    lr: float,
    momentum: float = SGD_MOMENTUM,
) -> OptimizerState:
    """Create zeroed state for `params`."""
    if name == "adam":
        return OptimizerState(
            name=name,
            lr=lr,
            first_moments=[np.zeros_like(p.data) for p in params],
            second_moments=[np.zeros_like(p.data) for p in params],
        )
    if name == "sgd":
        return OptimizerState(
            name=name,
            lr=lr,
            momentum=momentum,
            velocities=[np.zeros_like(p.data) for p in params],
        )
    raise ValueError(f"unknown optimizer {name!r}")


def zero_grad(params: Sequence[Tensor]) -> None:
    for param in params:
        param.zero_grad()


def optimizer_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimizerState,
) -> None:
    """Apply one update in place; a missing gradient counts as zero."""
    buffers = state.first_moments if state.name == "adam" else state.velocities
    if len(params) != len(grads) or len(params) != len(buffers):
        raise ShapeError(
            f"{len(params)} parameters, {len(grads)} gradients, "
            f"{len(buffers)} state buffers"
        )
    state.step_count += 1
    for index, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeError(
                f"gradient shape {grad.shape} does not match parameter {param.shape}"
            )
        if state.name == "adam":
            _adam_update(param, grad, state, index)
        else:
            _sgd_update(param, grad, state, index)


def _adam_update(
    param: Tensor, grad: np.ndarray, state: OptimizerState, index: int
) -> None:
    beta1, beta2 = state.betas
    m = state.first_moments[index]
    v = state.second_moments[index]
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**state.step_count)
    v_hat = v / (1.0 - beta2**state.step_count)
    update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    param.data -= update.astype(param.dtype)


def _sgd_update(
    param: Tensor, grad: np.ndarray, state: OptimizerState, index: int
) -> None:
    velocity = state.velocities[index]
    velocity *= state.momentum
    velocity += grad
    param.data -= (state.lr * velocity).astype(param.dtype)
