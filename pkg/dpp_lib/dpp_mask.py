"""Trainable pruning logits, granularity tying and masked layers.

Every prunable layer views its weights as an (n_in, a, n_out) block, where
`a` is the kernel area (1 for fully-connected layers). The granularity picks
the pruning axis and which logits are tied together:

    level    pruning axis         effective logits     C        D
    fine     kernel weights       n_in x a x n_out     a        n_in * n_out
    fine*    input neurons        n_in x 1 x n_out     n_in     n_out
    medium   kernels              n_in x 1 x n_out     n_in     n_out
    coarse   filters              1 x 1 x n_out        n_out    1

(*) fully-connected layers, where a = 1: K of n_in inputs per output neuron.

Typical usage:
    from dpp_lib.dpp_mask import Granularity, GranularitySpec, LayerDims, build_logits

    dims = LayerDims(n_in=784, n_out=300)
    logits = build_logits(dims, GranularitySpec(Granularity.FINE, k=15))
    mask = realize_mask(logits, sample_gumbel(logits.shape, rng), tau=5.0)
    w_masked = apply_mask(weight, mask)
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from dpp_lib.gumbel_topk import (
    GumbelNoiseField,
    MaskConfigError,
    check_k,
    hard_topk_khot,
    relaxed_topk,
)
from dpp_lib.quant import QuantSpec, clip_latent, quantize_forward
from dpp_lib.tensor import (
    ShapeError,
    Tensor,
    add_bias,
    apply_op,
    broadcast_to,
    conv2d,
    elementwise_mul,
    matmul,
    reshape,
    scale,
)

logger = logging.getLogger(__name__)


class Granularity(str, Enum):
    FINE = "fine"
    MEDIUM = "medium"
    COARSE = "coarse"


@dataclass(frozen=True)
class LayerDims:
    """Layer extents; `kernel` is None for fully-connected layers."""

    n_in: int
    n_out: int
    kernel: Optional[Tuple[int, int]] = None

    @property
    def a(self) -> int:
        if self.kernel is None:
            return 1
        return self.kernel[0] * self.kernel[1]

    @property
    def is_conv(self) -> bool:
        return self.kernel is not None

    @property
    def block_shape(self) -> Tuple[int, int, int]:
        return (self.n_in, self.a, self.n_out)

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kernel is None:
            return (self.n_in, self.n_out)
        return (self.n_in, self.kernel[0], self.kernel[1], self.n_out)

    @property
    def parameter_count(self) -> int:
        return self.n_in * self.a * self.n_out


@dataclass(frozen=True)
class PruningGeometry:
    """Axis, tying and counts that a granularity induces on concrete dims."""

    level: Granularity
    k: int
    dims: LayerDims
    p_axis: int
    logit_shape: Tuple[int, int, int]
    c: int
    d: int
    s: int

    @property
    def prunes_input_axis(self) -> bool:
        return self.p_axis == 0

    @property
    def index_count(self) -> int:
        """Indices a structured-sparse layout stores for this layer."""
        if self.level is Granularity.FINE:
            return self.s
        if self.level is Granularity.MEDIUM:
            return self.k * self.dims.n_out
        return 0

    @property
    def stored_values(self) -> int:
        """Values plus indices held in memory: 2S, S + K*n_out, or S."""
        return self.s + self.index_count


@dataclass(frozen=True)
class GranularitySpec:
    level: Granularity
    k: int

    def geometry(self, dims: LayerDims) -> PruningGeometry:
        """Resolve the pruning axis and counts for `dims`.

        Raises:
            MaskConfigError: If K lies outside [1, C]
        """
        n_in, a, n_out = dims.block_shape
        if self.level is Granularity.FINE and a > 1:
            p_axis, shape, c, d = 1, (n_in, a, n_out), a, n_in * n_out
            s = n_in * self.k * n_out
        elif self.level is Granularity.COARSE:
            p_axis, shape, c, d = 2, (1, 1, n_out), n_out, 1
            s = n_in * a * self.k
        else:
            p_axis, shape, c, d = 0, (n_in, 1, n_out), n_in, n_out
            s = self.k * a * n_out
        check_k(self.k, c)
        return PruningGeometry(self.level, self.k, dims, p_axis, shape, c, d, s)


@dataclass
class PruningLogits:
    """Effective logits plus the broadcast that ties them to weight positions."""

    logits: Tensor
    geometry: PruningGeometry

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.logits.shape

    def tie(self, effective: Tensor) -> Tensor:
        """Expand an effective-shaped tensor to the layer's weight shape."""
        full = broadcast_to(effective, self.geometry.dims.block_shape)
        return reshape(full, self.geometry.dims.weight_shape)

    def tie_array(self, effective: np.ndarray) -> np.ndarray:
        full = np.broadcast_to(effective, self.geometry.dims.block_shape)
        return full.reshape(self.geometry.dims.weight_shape).copy()


@dataclass
class MaskRealization:
    """A hard K-hot mask in weight shape and its relaxed counterpart.

    `hard` carries the relaxed backward path when produced under a tape.
    """

    hard: Tensor
    soft: np.ndarray


def build_logits(
    dims: LayerDims,
    granularity: GranularitySpec,
    init: float = 0.0,
    dtype: type = np.float32,
) -> PruningLogits:
    """Create trainable logits of the granularity's effective shape."""
    geometry = granularity.geometry(dims)
    data = np.full(geometry.logit_shape, init, dtype=dtype)
    return PruningLogits(Tensor(data, requires_grad=True, name="logits"), geometry)


def realize_mask(
    logits: PruningLogits, noise: GumbelNoiseField, tau: float
) -> MaskRealization:
    """Draw a hard mask with a relaxed backward path, in weight shape."""
    geometry = logits.geometry
    hard, soft = relaxed_topk(logits.logits, noise, geometry.k, geometry.p_axis, tau)
    return MaskRealization(hard=logits.tie(hard), soft=logits.tie_array(soft))


def draw_hard_mask(logits: PruningLogits, noise: GumbelNoiseField) -> np.ndarray:
    """Hard mask in weight shape, outside of any autograd recording."""
    geometry = logits.geometry
    effective = hard_topk_khot(
        noise.perturb(logits.logits.data), geometry.k, geometry.p_axis
    )
    return logits.tie_array(effective)


def apply_mask(weight: Tensor, mask: MaskRealization) -> Tensor:
    if weight.shape != mask.hard.shape:
        raise ShapeError(
            f"mask of shape {mask.hard.shape} does not fit weights {weight.shape}"
        )
    return elementwise_mul(weight, mask.hard)


def _entropy_terms(
    effective: np.ndarray, p_axis: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    shifted = effective - effective.max(axis=p_axis, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=p_axis, keepdims=True))
    probs = np.exp(log_probs)
    entropy = -(probs * log_probs).sum(axis=p_axis, keepdims=True)
    return probs, log_probs, entropy


def entropy_penalty(logits: PruningLogits) -> Tensor:
    """Mean Shannon entropy of the softmax over each of the D distributions."""
    p_axis = logits.geometry.p_axis
    distributions = logits.geometry.d
    probs, log_probs, entropy = _entropy_terms(logits.logits.data, p_axis)
    value = np.asarray(entropy.sum() / distributions, dtype=logits.logits.dtype)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (-probs * (log_probs + entropy) * (g / distributions),)

    return apply_op("entropy_penalty", (logits.logits,), value, _backward)


def xavier_uniform(
    dims: LayerDims, rng: np.random.Generator, dtype: type = np.float32
) -> np.ndarray:
    """Glorot-uniform weights with fan sizes counted per kernel position."""
    bound = xavier_bound(dims)
    return rng.uniform(-bound, bound, size=dims.weight_shape).astype(dtype)


def xavier_bound(dims: LayerDims) -> float:
    return float(np.sqrt(6.0 / (dims.a * (dims.n_in + dims.n_out))))


class MaskedLayer:
    """A fully-connected or convolutional layer with a learned K-hot mask.

    Only the weights are masked and quantized; the bias is left untouched.
    For coarse granularity the bias of a pruned filter is gated by the same
    filter decision so that pruned filters emit exact zeros.
    """

    def __init__(
        self,
        dims: LayerDims,
        granularity: GranularitySpec,
        rng: np.random.Generator,
        quant: QuantSpec = QuantSpec(),
        dtype: type = np.float32,
    ) -> None:
        self.dims = dims
        self.granularity = granularity
        self.quant = quant
        self.logits = build_logits(dims, granularity, dtype=dtype)
        weights = xavier_uniform(dims, rng, dtype)
        if quant.enabled:
            # latent weights live in [-1, 1]; the fixed gain restores the
            # Glorot range of the layer.
            self.gain = np.dtype(dtype).type(xavier_bound(dims))
            weights = weights / self.gain
        else:
            self.gain = np.dtype(dtype).type(1.0)
        self.weight = Tensor(weights, requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(dims.n_out, dtype=dtype), requires_grad=True)
        self.frozen_mask: Optional[np.ndarray] = None
        logger.debug(
            "%s layer %s: %s K=%d of C=%d, S=%d, %d-bit",
            self.kind,
            dims.weight_shape,
            granularity.level.value,
            granularity.k,
            self.geometry.c,
            self.geometry.s,
            quant.bits,
        )

    @classmethod
    def from_arrays(
        cls,
        dims: LayerDims,
        granularity: GranularitySpec,
        weight: np.ndarray,
        bias: np.ndarray,
        mask: np.ndarray,
    ) -> "MaskedLayer":
        """Full-precision layer holding already-masked weights and a frozen mask."""
        rng = np.random.default_rng(0)
        layer = cls(dims, granularity, rng, dtype=weight.dtype.type)
        if weight.shape != dims.weight_shape or mask.shape != dims.weight_shape:
            raise ShapeError(
                f"weights {weight.shape} and mask {mask.shape} must both be "
                f"{dims.weight_shape}"
            )
        layer.weight.data = weight
        layer.bias.data = bias
        layer.frozen_mask = mask
        return layer

    @property
    def geometry(self) -> PruningGeometry:
        return self.logits.geometry

    @property
    def kind(self) -> str:
        return "conv" if self.dims.is_conv else "linear"

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias, self.logits.logits]

    def effective_weight(self, mask: Tensor) -> Tensor:
        """Quantize, rescale, then mask the weights."""
        weight = quantize_forward(self.weight, self.quant)
        if self.quant.enabled:
            weight = scale(weight, self.gain)
        return elementwise_mul(weight, mask)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        if mask.shape != self.dims.weight_shape:
            raise ShapeError(
                f"mask of shape {mask.shape} does not fit weights "
                f"{self.dims.weight_shape}"
            )
        weight = self.effective_weight(mask)
        bias = self.bias
        if self.geometry.level is Granularity.COARSE:
            gate = mask.data.reshape(self.dims.block_shape)[0, 0, :]
            bias = elementwise_mul(bias, Tensor(gate))
        out = conv2d(x, weight) if self.dims.is_conv else matmul(x, weight)
        return add_bias(out, bias)

    def clip_latent(self) -> None:
        clip_latent(self.weight, self.quant)

    def freeze(self, noise: GumbelNoiseField) -> np.ndarray:
        """Draw one hard mask and keep it for inference and export."""
        self.frozen_mask = draw_hard_mask(self.logits, noise)
        return self.frozen_mask

    def masked_weight_array(self, mask: np.ndarray) -> np.ndarray:
        """Effective weights under a fixed hard mask, without recording."""
        return self.effective_weight(Tensor(mask)).data


__all__ = [
    "Granularity",
    "GranularitySpec",
    "LayerDims",
    "MaskConfigError",
    "MaskRealization",
    "MaskedLayer",
    "PruningGeometry",
    "PruningLogits",
    "apply_mask",
    "build_logits",
    "draw_hard_mask",
    "entropy_penalty",
    "realize_mask",
]
