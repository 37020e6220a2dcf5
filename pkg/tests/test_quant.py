"""Tests for dpp_lib.quant."""

import numpy as np
import pytest

from dpp_lib.dpp_mask import Granularity, GranularitySpec, LayerDims, MaskedLayer
from dpp_lib.optim import init_optimizer, optimizer_step, zero_grad
from dpp_lib.quant import (
    QuantConfigError,
    QuantSpec,
    clip_latent,
    dequantize_codes,
    quantize_codes,
    quantize_forward,
)
from dpp_lib.tensor import (
    Tape,
    Tensor,
    elementwise_mul,
    relu,
    softmax_cross_entropy,
    tensor_sum,
)

FINE = Granularity.FINE


class TestCodebook:
    def test_binarization_maps_to_sign(self) -> None:
        """Test 1-bit codes and values."""
        spec = QuantSpec(bits=1)
        latent = np.array([-0.7, -0.0, 0.0, 0.3])

        codes = quantize_codes(latent, spec)

        np.testing.assert_array_equal(codes, [0, 1, 1, 1])
        np.testing.assert_array_equal(dequantize_codes(codes, spec), [-1, 1, 1, 1])

    def test_two_bit_grid(self) -> None:
        """Test the 2-bit codebook."""
        spec = QuantSpec(bits=2)
        latent = np.array([-1.0, -0.5, -0.1, 0.2, 0.7, 1.0])

        values = dequantize_codes(quantize_codes(latent, spec), spec, np.float64)

        np.testing.assert_allclose(values, [-1, -1 / 3, -1 / 3, 1 / 3, 1, 1])

    def test_eight_bit_error_within_half_step(self) -> None:
        """Test the 8-bit rounding error."""
        spec = QuantSpec(bits=8)
        latent = np.random.default_rng(0).uniform(-1.0, 1.0, 1000)

        values = dequantize_codes(quantize_codes(latent, spec), spec, np.float64)

        assert np.max(np.abs(values - latent)) <= spec.step / 2 + 1e-12

    def test_out_of_range_latent_is_clipped_to_grid_ends(self) -> None:
        """Test latents beyond the codebook range."""
        spec = QuantSpec(bits=2)

        codes = quantize_codes(np.array([-3.0, 3.0]), spec)

        np.testing.assert_array_equal(codes, [0, 3])


class TestStraightThrough:
    def test_gradient_passes_inside_unit_interval(self) -> None:
        """Test the straight-through gradient mask."""
        # Arrange
        latent = Tensor(np.array([-1.5, -0.4, 0.2, 0.9, 1.2]), requires_grad=True)
        upstream = np.array([1.0, 2.0, 3.0, 4.0, 5.0])

        # Act
        with Tape() as tape:
            quantized = quantize_forward(latent, QuantSpec(2))
            loss = tensor_sum(elementwise_mul(quantized, Tensor(upstream)))
        tape.backward(loss)

        # Assert
        np.testing.assert_array_equal(latent.grad, [0.0, 2.0, 3.0, 4.0, 0.0])

    def test_full_precision_is_identity(self) -> None:
        """Test that 32 bits leaves weights untouched."""
        latent = Tensor(np.array([0.123]))

        assert quantize_forward(latent, QuantSpec(32)) is latent

    def test_clip_latent(self) -> None:
        """Test clipping latents after an update."""
        latent = Tensor(np.array([-2.0, 0.5, 1.5]))

        clip_latent(latent, QuantSpec(1))

        np.testing.assert_array_equal(latent.data, [-1.0, 0.5, 1.0])


class TestErrors:
    @pytest.mark.parametrize("bits", [0, 3, 16])
    def test_unsupported_bit_width(self, bits: int) -> None:
        """Test bit widths without a codebook."""
        with pytest.raises(QuantConfigError):
            QuantSpec(bits)

    def test_full_precision_has_no_codes(self) -> None:
        """Test asking for codes at 32 bits."""
        with pytest.raises(QuantConfigError):
            quantize_codes(np.zeros(2), QuantSpec(32))


class TestBinarizedTraining:
    def test_two_layer_mlp_fits_xor(self) -> None:
        """Test that sign weights learn XOR through the straight-through gradient."""
        # Arrange
        rng = np.random.default_rng(0)
        corners = np.array([[-1, -1], [-1, 1], [1, -1], [1, 1]], dtype=np.float32)
        jitter = rng.normal(scale=0.1, size=(32, 2))
        points = (np.repeat(corners, 8, axis=0) + jitter).astype(np.float32)
        labels = np.repeat((corners[:, 0] * corners[:, 1] > 0).astype(int), 8)
        targets = np.eye(2, dtype=np.float32)[labels]
        binary = QuantSpec(bits=1)
        layers = [
            MaskedLayer(LayerDims(2, 32), GranularitySpec(FINE, 2), rng, binary),
            MaskedLayer(LayerDims(32, 2), GranularitySpec(FINE, 32), rng, binary),
        ]
        masks = [
            Tensor(np.ones(layer.dims.weight_shape, np.float32)) for layer in layers
        ]
        params = [p for layer in layers for p in (layer.weight, layer.bias)]
        state = init_optimizer("adam", params, lr=0.01)

        # Act
        accuracy = 0.0
        for _ in range(2000):
            zero_grad(params)
            with Tape() as tape:
                hidden = relu(layers[0].forward(Tensor(points), masks[0]))
                logits = layers[1].forward(hidden, masks[1])
                loss = softmax_cross_entropy(logits, targets)
            accuracy = float(np.mean(logits.data.argmax(axis=1) == labels))
            if accuracy == 1.0:
                break
            tape.backward(loss)
            optimizer_step(params, [p.grad for p in params], state)
            for layer in layers:
                layer.clip_latent()

        # Assert
        assert accuracy == 1.0
        for layer in layers:
            assert np.all(np.abs(layer.weight.data) <= 1.0)
