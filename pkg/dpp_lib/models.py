"""The two MNIST architectures, built from masked layers.

Typical usage:
    from dpp_lib.models import build_network

    network = build_network("lenet300-100", granularities, QuantSpec(32), rng)
    masks = network.realize_masks(gumbel_rng, tau=5.0)
    logits = network.forward(Tensor(batch), [m.hard for m in masks])
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from dpp_lib.dpp_mask import (
    GranularitySpec,
    LayerDims,
    MaskedLayer,
    MaskRealization,
    draw_hard_mask,
    entropy_penalty,
    realize_mask,
)
from dpp_lib.gumbel_topk import sample_gumbel
from dpp_lib.quant import QuantSpec
from dpp_lib.tensor import (
    ShapeError,
    Tensor,
    add,
    flatten,
    maxpool2x2,
    relu,
    scale,
)

logger = logging.getLogger(__name__)

LENET300 = "lenet300-100"
LENET5 = "lenet5-caffe"

PREDICT_BATCH = 1000


class ReLU:
    kind = "relu"

    def forward(self, x: Tensor) -> Tensor:
        return relu(x)


class MaxPool2x2:
    kind = "maxpool"

    def forward(self, x: Tensor) -> Tensor:
        return maxpool2x2(x)


class Flatten:
    kind = "flatten"

    def forward(self, x: Tensor) -> Tensor:
        return flatten(x)


Module = Union[MaskedLayer, ReLU, MaxPool2x2, Flatten]

ARCHITECTURES: Dict[str, List[Union[LayerDims, str]]] = {
    LENET300: [
        LayerDims(784, 300),
        "relu",
        LayerDims(300, 100),
        "relu",
        LayerDims(100, 10),
    ],
    # canonical Caffe variant: no activation after the convolutions
    LENET5: [
        LayerDims(1, 20, kernel=(5, 5)),
        "maxpool",
        LayerDims(20, 50, kernel=(5, 5)),
        "maxpool",
        "flatten",
        LayerDims(800, 500),
        "relu",
        LayerDims(500, 10),
    ],
}

INPUT_SHAPES: Dict[str, Tuple[int, ...]] = {
    LENET300: (784,),
    LENET5: (1, 28, 28),
}


class UnknownArchitectureError(Exception):
    """Raised when an architecture id is not one of ARCHITECTURES."""

    pass


def architecture_dims(arch: str) -> List[LayerDims]:
    """Dims of every prunable layer of `arch`, in forward order."""
    if arch not in ARCHITECTURES:
        raise UnknownArchitectureError(
            f"unknown architecture {arch!r}; choose one of {sorted(ARCHITECTURES)}"
        )
    return [entry for entry in ARCHITECTURES[arch] if isinstance(entry, LayerDims)]


def op_module(name: str) -> Module:
    if name == "relu":
        return ReLU()
    if name == "maxpool":
        return MaxPool2x2()
    if name == "flatten":
        return Flatten()
    raise UnknownArchitectureError(f"unknown operation {name!r}")


@dataclass
class Network:
    """An ordered stack of masked layers and parameter-free operations."""

    arch: str
    modules: List[Module]
    input_shape: Tuple[int, ...]
    beta: float = 1.0
    quant: QuantSpec = field(default_factory=QuantSpec)

    @property
    def layers(self) -> List[MaskedLayer]:
        return [m for m in self.modules if isinstance(m, MaskedLayer)]

    def parameters(self) -> List[Tensor]:
        params: List[Tensor] = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def dense_parameter_count(self) -> int:
        """Weights of the unpruned network; biases are not counted."""
        return sum(layer.dims.parameter_count for layer in self.layers)

    def active_parameter_count(self) -> int:
        return sum(layer.geometry.s for layer in self.layers)

    def forward(self, x: Tensor, masks: Sequence[Tensor]) -> Tensor:
        """Logits of a batch; `masks` holds one weight-shaped mask per layer."""
        if len(masks) != len(self.layers):
            raise ShapeError(f"{len(masks)} masks for {len(self.layers)} layers")
        expected = x.shape[1:]
        if expected != self.input_shape:
            raise ShapeError(f"input {x.shape} does not match {self.input_shape}")
        remaining = iter(masks)
        for module in self.modules:
            if isinstance(module, MaskedLayer):
                x = module.forward(x, next(remaining))
            else:
                x = module.forward(x)
        return x

    def realize_masks(
        self, rng: np.random.Generator, tau: float
    ) -> List[MaskRealization]:
        """One relaxed mask per layer; record them under a tape to train Phi."""
        realizations = []
        for layer in self.layers:
            noise = sample_gumbel(layer.logits.shape, rng, self.beta)
            realizations.append(realize_mask(layer.logits, noise, tau))
        return realizations

    def sample_masks(self, rng: np.random.Generator) -> List[np.ndarray]:
        """One hard mask per layer, without touching the frozen masks."""
        masks = []
        for layer in self.layers:
            noise = sample_gumbel(layer.logits.shape, rng, self.beta)
            masks.append(draw_hard_mask(layer.logits, noise))
        return masks

    def freeze_masks(self, rng: np.random.Generator) -> List[np.ndarray]:
        """Draw the single inference-time mask of every layer and keep it."""
        return [
            layer.freeze(sample_gumbel(layer.logits.shape, rng, self.beta))
            for layer in self.layers
        ]

    def frozen_masks(self) -> List[np.ndarray]:
        masks = []
        for index, layer in enumerate(self.layers):
            if layer.frozen_mask is None:
                raise ShapeError(f"layer {index} has no frozen mask")
            masks.append(layer.frozen_mask)
        return masks

    def entropy_loss(self) -> Tensor:
        """Entropy penalty averaged over the layers."""
        total: Optional[Tensor] = None
        for layer in self.layers:
            term = entropy_penalty(layer.logits)
            total = term if total is None else add(total, term)
        assert total is not None
        return scale(total, 1.0 / len(self.layers))

    def clip_latent(self) -> None:
        for layer in self.layers:
            layer.clip_latent()

    def predict(
        self, images: np.ndarray, masks: Optional[Sequence[np.ndarray]] = None
    ) -> np.ndarray:
        """Logits for `images` under fixed hard masks, the frozen ones by default."""
        if masks is None:
            masks = self.frozen_masks()
        mask_tensors = [Tensor(m) for m in masks]
        outputs = []
        for start in range(0, len(images), PREDICT_BATCH):
            batch = images[start : start + PREDICT_BATCH].reshape(
                (-1,) + self.input_shape
            )
            outputs.append(self.forward(Tensor(batch), mask_tensors).data)
        if not outputs:
            return np.zeros((0, self.layers[-1].dims.n_out), dtype=np.float32)
        return np.concatenate(outputs, axis=0)

    def trace_shapes(self) -> List[Tuple[int, ...]]:
        """Per-sample input shape of every module, plus the output shape last."""
        shapes = [self.input_shape]
        current = self.input_shape
        for module in self.modules:
            if isinstance(module, MaskedLayer):
                kernel = module.dims.kernel
                if kernel is not None:
                    height = current[1] - kernel[0] + 1
                    width = current[2] - kernel[1] + 1
                    current = (module.dims.n_out, height, width)
                else:
                    current = (module.dims.n_out,)
            elif isinstance(module, MaxPool2x2):
                current = (current[0], current[1] // 2, current[2] // 2)
            elif isinstance(module, Flatten):
                current = (int(np.prod(current)),)
            shapes.append(current)
        return shapes


def build_network(
    arch: str,
    granularities: Sequence[GranularitySpec],
    quant: QuantSpec,
    rng: np.random.Generator,
    beta: float = 1.0,
) -> Network:
    """Instantiate `arch` with one GranularitySpec per prunable layer.

    Raises:
        UnknownArchitectureError: If `arch` is not known
        ShapeError: If the number of specs differs from the prunable layers
    """
    dims = architecture_dims(arch)
    if len(granularities) != len(dims):
        raise ShapeError(
            f"{arch} has {len(dims)} prunable layers, got {len(granularities)} specs"
        )
    specs = iter(zip(dims, granularities))
    modules: List[Module] = []
    for entry in ARCHITECTURES[arch]:
        if isinstance(entry, LayerDims):
            layer_dims, spec = next(specs)
            modules.append(MaskedLayer(layer_dims, spec, rng, quant))
        else:
            modules.append(op_module(entry))
    network = Network(arch, modules, INPUT_SHAPES[arch], beta=beta, quant=quant)
    logger.debug(
        "built %s: P=%d, S=%d",
        arch,
        network.dense_parameter_count(),
        network.active_parameter_count(),
    )
    return network
