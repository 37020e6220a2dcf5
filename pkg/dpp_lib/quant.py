"""Weight binarization and uniform quantization with straight-through gradients.

Latent full-precision weights are kept by the optimizer and clipped to
[-1, 1]; the forward pass sees their quantized value. One bit maps to
sign(w) in {-1, +1}; b >= 2 bits map to the nearest point of the grid
-1 + c * step, c = 0 .. 2**b - 1, with step = 2 / (2**b - 1). Gradients
pass unchanged where |latent| <= 1 and are zeroed elsewhere.

Typical usage:
    from dpp_lib.quant import QuantSpec, quantize_forward

    spec = QuantSpec(bits=2)
    w_q = quantize_forward(latent, spec)
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from dpp_lib.tensor import NonFiniteError, Tensor, apply_op

SUPPORTED_BITS = (1, 2, 8, 32)
FULL_PRECISION_BITS = 32


class QuantConfigError(Exception):
    """Raised for unsupported bit widths."""

    pass


@dataclass(frozen=True)
class QuantSpec:
    """Bit width of the stored weights; 32 means pass-through."""

    bits: int = FULL_PRECISION_BITS

    def __post_init__(self) -> None:
        if self.bits not in SUPPORTED_BITS:
            raise QuantConfigError(
                f"unsupported bit width {self.bits}; choose one of {SUPPORTED_BITS}"
            )

    @property
    def enabled(self) -> bool:
        return self.bits < FULL_PRECISION_BITS

    @property
    def levels(self) -> int:
        return int(2**self.bits)

    @property
    def step(self) -> float:
        """Distance between neighbouring codebook values."""
        return 2.0 / (self.levels - 1)


def quantize_codes(latent: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Codebook index of every latent value (b < 32 only)."""
    if not spec.enabled:
        raise QuantConfigError("32-bit weights are stored verbatim, not as codes")
    if spec.bits == 1:
        return (latent >= 0).astype(np.uint32)
    clipped = np.clip(latent.astype(np.float64), -1.0, 1.0)
    codes = np.floor((clipped + 1.0) / spec.step + 0.5)
    return np.clip(codes, 0, spec.levels - 1).astype(np.uint32)


def dequantize_codes(
    codes: np.ndarray, spec: QuantSpec, dtype: type = np.float32
) -> np.ndarray:
    """Codebook value of every code."""
    if spec.bits == 1:
        return np.where(codes == 1, 1.0, -1.0).astype(dtype)
    return (-1.0 + codes.astype(np.float64) * spec.step).astype(dtype)


def quantize_backward(grad: np.ndarray, latent: np.ndarray) -> np.ndarray:
    """Straight-through gradient, cancelled where |latent| > 1."""
    return grad * (np.abs(latent) <= 1.0)


def quantize_forward(latent: Tensor, spec: QuantSpec) -> Tensor:
    """Quantized view of `latent`; returns `latent` itself for 32 bits."""
    if not spec.enabled:
        return latent
    if not np.all(np.isfinite(latent.data)):
        raise NonFiniteError("quantize_forward received non-finite weights")
    latent_data = latent.data
    values = dequantize_codes(quantize_codes(latent_data, spec), spec, latent.dtype)

    def _backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (quantize_backward(g, latent_data),)

    return apply_op(f"quantize{spec.bits}", (latent,), values, _backward)


def clip_latent(latent: Tensor, spec: QuantSpec) -> None:
    """Keep latent weights inside [-1, 1] after an optimizer update."""
    if spec.enabled:
        np.clip(latent.data, -1.0, 1.0, out=latent.data)
