"""Monte Carlo mask marginals and the entropy-based pruning metrics.

For one layer, the marginal pi[d, c] is the probability that candidate c of
distribution d survives a mask draw. From the marginals this module derives:

- Average Pruning Entropy: mean over d of -sum_c pi log pi (confidence);
- mean-mask entropy: the same entropy of the averaged row;
- Pruning Diversity: their difference, how much the D masks specialize.

All entropies are in nats and bounded by -K log(K / C).

Typical usage:
    from dpp_lib.sparsity_metrics import estimate_marginals, layer_metrics

    est = estimate_marginals(layer.logits, beta=1.0, samples=100, rng=rng)
    metrics = layer_metrics(est)
    print(metrics.h_norm, metrics.i_norm)
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from dpp_lib.dpp_mask import PruningLogits
from dpp_lib.gumbel_topk import gumbel_from_uniform, hard_topk_khot

DEFAULT_SAMPLES = 100
# upper bound on the number of noise entries drawn at once
CHUNK_ENTRIES = 4_000_000


@dataclass(frozen=True)
class MarginalEstimate:
    """Inclusion frequencies of a layer's candidates, shape (D, C)."""

    pi: np.ndarray
    k: int
    samples: int

    @property
    def d(self) -> int:
        return int(self.pi.shape[0])

    @property
    def c(self) -> int:
        return int(self.pi.shape[1])

    def standard_error(self) -> np.ndarray:
        """Per-entry binomial standard error sqrt(pi (1 - pi) / T)."""
        return np.sqrt(self.pi * (1.0 - self.pi) / self.samples)


@dataclass(frozen=True)
class LayerMetrics:
    h_avg: float
    h_mean_mask: float
    diversity: Optional[float]
    upper_bound: float

    @property
    def h_norm(self) -> float:
        return _normalize(self.h_avg, self.upper_bound)

    @property
    def i_norm(self) -> Optional[float]:
        if self.diversity is None:
            return None
        return _normalize(self.diversity, self.upper_bound)


def _normalize(value: float, bound: float) -> float:
    return 0.0 if bound == 0.0 else value / bound


def entropy_upper_bound(k: int, c: int) -> float:
    """-K log(K / C); zero when every candidate is kept."""
    return float(-k * math.log(k / c))


def row_entropy(pi: np.ndarray) -> np.ndarray:
    """-sum pi log pi along the last axis, with 0 log 0 = 0."""
    safe = np.where(pi > 0.0, pi, 1.0)
    return -(pi * np.log(safe)).sum(axis=-1)


def to_distributions(effective: np.ndarray, p_axis: int) -> np.ndarray:
    """Reshape effective logits or masks into (D, C) rows."""
    moved = np.moveaxis(effective, p_axis, -1)
    return moved.reshape(-1, moved.shape[-1])


def sample_marginals(
    logits: np.ndarray,
    k: int,
    p_axis: int,
    beta: float,
    samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Average `samples` hard K-hot draws of `logits`, in the logits' shape."""
    if samples < 1:
        raise ValueError(f"need at least one sample, got {samples}")
    chunk = max(1, CHUNK_ENTRIES // max(1, logits.size))
    counts = np.zeros(logits.shape, dtype=np.int64)
    remaining = samples
    while remaining > 0:
        n = min(chunk, remaining)
        u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=(n,) + logits.shape)
        perturbed = logits.astype(np.float64) + beta * gumbel_from_uniform(u)
        counts += hard_topk_khot(perturbed, k, p_axis + 1).sum(axis=0).astype(np.int64)
        remaining -= n
    return counts / samples


def estimate_marginals(
    logits: PruningLogits,
    beta: float,
    samples: int = DEFAULT_SAMPLES,
    rng: Optional[np.random.Generator] = None,
) -> MarginalEstimate:
    """Monte Carlo marginals of a layer's pruning distributions.

    Raises:
        ValueError: If `samples` is smaller than 1
    """
    rng = rng if rng is not None else np.random.default_rng()
    geometry = logits.geometry
    pi = sample_marginals(
        logits.logits.data, geometry.k, geometry.p_axis, beta, samples, rng
    )
    return MarginalEstimate(
        pi=to_distributions(pi, geometry.p_axis), k=geometry.k, samples=samples
    )


def average_pruning_entropy(est: MarginalEstimate) -> float:
    return float(row_entropy(est.pi).mean())


def mean_mask_entropy(est: MarginalEstimate) -> float:
    return float(row_entropy(est.pi.mean(axis=0)))


def pruning_diversity(est: MarginalEstimate) -> Optional[float]:
    """H(mean mask) - H_avg; None when the layer has a single distribution."""
    if est.d < 2:
        return None
    return mean_mask_entropy(est) - average_pruning_entropy(est)


def layer_metrics(est: MarginalEstimate) -> LayerMetrics:
    return LayerMetrics(
        h_avg=average_pruning_entropy(est),
        h_mean_mask=mean_mask_entropy(est),
        diversity=pruning_diversity(est),
        upper_bound=entropy_upper_bound(est.k, est.c),
    )
