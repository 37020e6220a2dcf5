"""Gumbel top-K sampling of K-hot masks and its relaxed backward path.

A mask realization keeps, along the pruning axis, the K positions with the
largest Gumbel-perturbed logits. For gradients, top-K is relaxed into K
successive tempered softmaxes where each step excludes the positions already
picked; the forward value stays hard and the backward pass flows through the
sum of those softmaxes.

Typical usage:
    from dpp_lib.gumbel_topk import RelaxationSchedule, relaxed_topk, tau_at

    schedule = RelaxationSchedule(n_iter=30)
    noise = sample_gumbel(logits.shape, rng, beta=1.0)
    hard, soft = relaxed_topk(logits, noise, k=15, axis=0, tau=tau_at(schedule, epoch))
"""

from dataclasses import dataclass
from typing import Iterator, Sequence, Tuple

import numpy as np

from dpp_lib.tensor import NonFiniteError, Tensor, apply_op, softmax

TAU_INIT = 5.0
TAU_END = 0.5


class MaskConfigError(Exception):
    """Raised when K, the noise scale or the temperature are out of range."""

    pass


class ScheduleError(Exception):
    """Raised when a temperature is requested outside the schedule."""

    pass


@dataclass(frozen=True)
class GumbelNoiseField:
    """Standard Gumbel draws shaped like the effective logits, with scale beta.

    beta = 0 turns the sampler into a deterministic top-K, which is only
    meant for debugging.
    """

    noise: np.ndarray
    beta: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise MaskConfigError(f"Gumbel scale must lie in [0, 1], got {self.beta}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.noise.shape)

    def perturb(self, logits: np.ndarray) -> np.ndarray:
        """Return logits + beta * noise in the logits' dtype."""
        return (logits + self.beta * self.noise).astype(logits.dtype, copy=False)


@dataclass(frozen=True)
class RelaxationSchedule:
    """Linear temperature annealing, stepped once per epoch."""

    n_iter: int
    tau_init: float = TAU_INIT
    tau_end: float = TAU_END

    def __post_init__(self) -> None:
        if self.n_iter < 1:
            raise ScheduleError(f"n_iter must be at least 1, got {self.n_iter}")
        if not 0.0 < self.tau_end <= self.tau_init:
            raise ScheduleError(
                f"need 0 < tau_end <= tau_init, got {self.tau_end}, {self.tau_init}"
            )

    @property
    def delta(self) -> float:
        if self.n_iter == 1:
            return 0.0
        return (self.tau_init - self.tau_end) / (self.n_iter - 1)


def tau_at(schedule: RelaxationSchedule, epoch: int) -> float:
    """Temperature used during 1-based `epoch`."""
    if not 1 <= epoch <= schedule.n_iter:
        raise ScheduleError(f"epoch {epoch} outside 1..{schedule.n_iter}")
    return max(schedule.tau_init - (epoch - 1) * schedule.delta, schedule.tau_end)


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    return -np.log(-np.log(u))


def sample_gumbel(
    shape: Sequence[int],
    rng: np.random.Generator,
    beta: float = 1.0,
    dtype: type = np.float32,
) -> GumbelNoiseField:
    """Draw an i.i.d. Gumbel(0, 1) field; U is never exactly 0 or 1."""
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=tuple(shape))
    return GumbelNoiseField(noise=gumbel_from_uniform(u).astype(dtype), beta=beta)


def check_k(k: int, candidates: int) -> None:
    if not 1 <= k <= candidates:
        raise MaskConfigError(f"K must lie in [1, {candidates}], got {k}")


def topk_order(perturbed: np.ndarray, axis: int) -> np.ndarray:
    """Positions along `axis` sorted by decreasing value; ties keep lower index."""
    return np.argsort(-perturbed, axis=axis, kind="stable")


def hard_topk_khot(perturbed: np.ndarray, k: int, axis: int) -> np.ndarray:
    """K-hot mask of the K largest entries in every slice along `axis`."""
    check_k(k, perturbed.shape[axis])
    if not np.all(np.isfinite(perturbed)):
        raise NonFiniteError("hard_topk_khot received non-finite logits")
    chosen = np.take(topk_order(perturbed, axis), np.arange(k), axis=axis)
    mask = np.zeros(perturbed.shape, dtype=perturbed.dtype)
    np.put_along_axis(mask, chosen, 1, axis=axis)
    return mask


def _exclusion_softmaxes(
    scaled: np.ndarray, order: np.ndarray, k: int
) -> Iterator[np.ndarray]:
    excluded = np.zeros(scaled.shape, dtype=bool)
    for step in range(k):
        yield softmax(np.where(excluded, -np.inf, scaled), axis=-1)
        np.put_along_axis(excluded, order[..., step : step + 1], True, axis=-1)


def relaxed_topk(
    logits: Tensor,
    noise: GumbelNoiseField,
    k: int,
    axis: int,
    tau: float,
) -> Tuple[Tensor, np.ndarray]:
    """Hard K-hot mask whose gradient is taken through the relaxed mask.

    Args:
        logits: Trainable logits
        noise: Gumbel field shaped like `logits`
        k: Number of positions kept per slice
        axis: Pruning axis
        tau: Softmax temperature, strictly positive

    Returns:
        (hard, soft): `hard` is a recorded tensor holding the K-hot mask whose
        backward pass is the Jacobian of `soft`; `soft` is the relaxed mask,
        non-negative and summing to K along `axis`. An entry passed over by
        an early step can collect more than 1 from the later steps. With
        K equal to the candidate count both masks are all ones and the
        logits receive no gradient.
    """
    if tau <= 0:
        raise MaskConfigError(f"temperature must be positive, got {tau}")
    if noise.shape != logits.shape:
        raise MaskConfigError(
            f"noise shape {noise.shape} does not match logits {logits.shape}"
        )
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("relaxed_topk received non-finite logits")
    check_k(k, logits.shape[axis])
    if k == logits.shape[axis]:
        # keeping every candidate makes the mask constant in the logits
        ones = np.ones(logits.shape, dtype=logits.dtype)
        return Tensor(ones), ones.copy()

    perturbed = np.moveaxis(noise.perturb(logits.data), axis, -1)
    order = topk_order(perturbed, axis=-1)
    scaled = perturbed / logits.dtype.type(tau)
    soft = np.zeros(scaled.shape, dtype=scaled.dtype)
    for step_probs in _exclusion_softmaxes(scaled, order, k):
        soft += step_probs
    hard = np.zeros(perturbed.shape, dtype=logits.dtype)
    np.put_along_axis(hard, order[..., :k], 1, axis=-1)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        upstream = np.moveaxis(g, axis, -1)
        grad = np.zeros(upstream.shape, dtype=upstream.dtype)
        for step_probs in _exclusion_softmaxes(scaled, order, k):
            centered = upstream - (upstream * step_probs).sum(axis=-1, keepdims=True)
            grad += step_probs * centered
        return (np.moveaxis(grad / tau, -1, axis),)

    hard_tensor = apply_op(
        "relaxed_topk", (logits,), np.moveaxis(hard, -1, axis), _backward
    )
    return hard_tensor, np.moveaxis(soft, -1, axis)
