"""Tests for the LeNet model zoo in dpp_lib.models."""

from typing import List, Tuple

import numpy as np
import pytest

from dpp_lib.dpp_mask import Granularity, GranularitySpec
from dpp_lib.models import (
    LENET5,
    LENET300,
    UnknownArchitectureError,
    architecture_dims,
    build_network,
)
from dpp_lib.quant import QuantSpec
from dpp_lib.tensor import ShapeError, Tensor


def _fine(*ks: int) -> List[GranularitySpec]:
    return [GranularitySpec(Granularity.FINE, k) for k in ks]


class TestArchitectures:
    def test_lenet300_parameter_counts(self) -> None:
        """Test dense and active counts of LeNet300-100."""
        network = build_network(
            LENET300, _fine(15, 6, 6), QuantSpec(), np.random.default_rng(0)
        )

        assert network.dense_parameter_count() == 266200
        assert network.active_parameter_count() == 15 * 300 + 6 * 100 + 6 * 10

    def test_lenet5_parameter_counts(self) -> None:
        """Test dense and active counts of LeNet5."""
        network = build_network(
            LENET5, _fine(10, 5, 10, 50), QuantSpec(), np.random.default_rng(0)
        )

        assert network.dense_parameter_count() == 430500
        assert network.active_parameter_count() == 200 + 5000 + 5000 + 500

    def test_lenet5_shapes(self) -> None:
        """Test the activation shapes of LeNet5."""
        network = build_network(
            LENET5, _fine(25, 25, 800, 500), QuantSpec(), np.random.default_rng(0)
        )

        shapes = network.trace_shapes()

        assert shapes[0] == (1, 28, 28)
        assert (50, 4, 4) in shapes
        assert shapes[-1] == (10,)

    def test_unknown_architecture(self) -> None:
        """Test an architecture name outside the zoo."""
        with pytest.raises(UnknownArchitectureError):
            architecture_dims("alexnet")

    def test_spec_count_must_match(self) -> None:
        """Test a layer list of the wrong length."""
        with pytest.raises(ShapeError):
            build_network(LENET300, _fine(1, 1), QuantSpec(), np.random.default_rng())


class TestForward:
    @pytest.mark.parametrize(
        "arch,ks,shape",
        [
            (LENET300, (15, 6, 6), (3, 784)),
            (LENET5, (10, 5, 10, 50), (3, 1, 28, 28)),
        ],
    )
    def test_logits_per_class(
        self, arch: str, ks: Tuple[int, ...], shape: Tuple[int, ...]
    ) -> None:
        """Test the forward pass of both architectures."""
        rng = np.random.default_rng(1)
        network = build_network(arch, _fine(*ks), QuantSpec(), rng)
        masks = [Tensor(m) for m in network.sample_masks(rng)]

        out = network.forward(Tensor(rng.random(shape).astype(np.float32)), masks)

        assert out.shape == (3, 10)
        assert np.all(np.isfinite(out.data))

    def test_wrong_mask_count(self) -> None:
        """Test forwarding with too few masks."""
        rng = np.random.default_rng(2)
        network = build_network(LENET300, _fine(15, 6, 6), QuantSpec(), rng)

        with pytest.raises(ShapeError):
            network.forward(Tensor(np.zeros((1, 784))), [])

    def test_wrong_input_shape(self) -> None:
        """Test forwarding images of the wrong shape."""
        rng = np.random.default_rng(3)
        network = build_network(LENET300, _fine(15, 6, 6), QuantSpec(), rng)
        masks = [Tensor(m) for m in network.sample_masks(rng)]

        with pytest.raises(ShapeError):
            network.forward(Tensor(np.zeros((1, 28, 28))), masks)

    def test_predict_reshapes_images_and_batches(self) -> None:
        """Test batched prediction on raw images."""
        rng = np.random.default_rng(4)
        network = build_network(LENET300, _fine(15, 6, 6), QuantSpec(), rng)
        network.freeze_masks(rng)

        logits = network.predict(rng.random((1200, 28, 28)).astype(np.float32))

        assert logits.shape == (1200, 10)


class TestMasks:
    def test_frozen_masks_are_reproducible(self) -> None:
        """Test that frozen masks depend only on the seed."""
        network = build_network(
            LENET300, _fine(15, 6, 6), QuantSpec(), np.random.default_rng(5)
        )

        first = network.freeze_masks(np.random.default_rng(9))
        second = network.freeze_masks(np.random.default_rng(9))

        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)
        assert network.frozen_masks()[0] is second[0]

    def test_missing_frozen_mask(self) -> None:
        """Test asking for frozen masks before freezing."""
        network = build_network(
            LENET300, _fine(15, 6, 6), QuantSpec(), np.random.default_rng(6)
        )

        with pytest.raises(ShapeError):
            network.frozen_masks()

    def test_entropy_loss_of_fresh_network(self) -> None:
        """Test the entropy loss of zero logits."""
        network = build_network(
            LENET300, _fine(15, 6, 6), QuantSpec(), np.random.default_rng(7)
        )

        value = float(network.entropy_loss().data)

        expected = (np.log(784) + np.log(300) + np.log(100)) / 3
        assert value == pytest.approx(expected, rel=1e-5)
