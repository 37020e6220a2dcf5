"""Tests for Gumbel top-K sampling and its relaxed gradient."""

from typing import Tuple

import numpy as np
import pytest

from dpp_lib.gumbel_topk import (
    GumbelNoiseField,
    MaskConfigError,
    RelaxationSchedule,
    ScheduleError,
    gumbel_from_uniform,
    hard_topk_khot,
    relaxed_topk,
    sample_gumbel,
    tau_at,
)
from dpp_lib.tensor import NonFiniteError, Tape, Tensor, elementwise_mul, tensor_sum
from tests.helpers import numerical_gradient, relative_error


class TestSchedule:
    def test_linear_annealing_endpoints(self) -> None:
        """Test the linear temperature schedule."""
        schedule = RelaxationSchedule(n_iter=10)

        taus = [tau_at(schedule, epoch) for epoch in range(1, 11)]

        assert taus[0] == pytest.approx(5.0)
        assert taus[-1] == pytest.approx(0.5)
        assert all(a > b for a, b in zip(taus, taus[1:]))
        assert taus[1] - taus[2] == pytest.approx(0.5)

    def test_single_epoch_uses_initial_temperature(self) -> None:
        """Test a one-epoch schedule."""
        assert tau_at(RelaxationSchedule(n_iter=1), 1) == pytest.approx(5.0)

    def test_epoch_outside_schedule(self) -> None:
        """Test asking for an epoch past the schedule."""
        with pytest.raises(ScheduleError):
            tau_at(RelaxationSchedule(n_iter=3), 4)

    def test_inverted_temperatures_rejected(self) -> None:
        """Test a schedule that would heat up."""
        with pytest.raises(ScheduleError):
            RelaxationSchedule(n_iter=3, tau_init=0.5, tau_end=5.0)


class TestSampleGumbel:
    def test_uniform_at_inverse_e_maps_to_zero(self) -> None:
        """Test the fixed point -log(-log(1/e)) = 0."""
        value = gumbel_from_uniform(np.array([1.0 / np.e]))

        assert value[0] == pytest.approx(0.0, abs=1e-12)

    def test_sample_mean_is_euler_mascheroni(self) -> None:
        """Test the mean of many standard Gumbel draws."""
        field = sample_gumbel((100_000,), np.random.default_rng(0), dtype=np.float64)

        assert field.noise.mean() == pytest.approx(0.5772, abs=0.02)
        assert np.all(np.isfinite(field.noise))

    def test_same_seed_gives_same_field(self) -> None:
        """Test that draws are reproducible from the seed alone."""
        a = sample_gumbel((4, 3, 2), np.random.default_rng(11))
        b = sample_gumbel((4, 3, 2), np.random.default_rng(11))

        np.testing.assert_array_equal(a.noise, b.noise)
        assert a.noise.dtype == np.float32


class TestHardTopK:
    def test_exact_popcount_on_random_cases(self) -> None:
        """Test that every slice keeps exactly K positions."""
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            c = int(rng.integers(1, 12))
            k = int(rng.integers(1, c + 1))
            axis = int(rng.integers(0, 3))
            shape = [int(rng.integers(1, 4)) for _ in range(3)]
            shape[axis] = c
            logits = rng.normal(size=shape) * rng.uniform(0.0, 5.0)
            beta = float(rng.uniform(0.0, 1.0))
            noise = sample_gumbel(shape, rng, beta=beta, dtype=np.float64)

            mask = hard_topk_khot(noise.perturb(logits), k, axis)

            assert np.all(mask.sum(axis=axis) == k)
            assert set(np.unique(mask)) <= {0.0, 1.0}

    def test_slice_offsets_leave_mask_unchanged(self) -> None:
        """Test that adding a constant per slice does not change any draw."""
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(7, 4))
        offsets = rng.uniform(-5.0, 5.0, size=(1, 4))
        for _ in range(50):
            noise = sample_gumbel(logits.shape, rng, dtype=np.float64)

            base = hard_topk_khot(noise.perturb(logits), 3, 0)
            shifted = hard_topk_khot(noise.perturb(logits + offsets), 3, 0)

            np.testing.assert_array_equal(shifted, base)

    def test_ties_keep_lowest_indices(self) -> None:
        """Test tie-breaking towards lower indices."""
        mask = hard_topk_khot(np.zeros((4, 2)), k=2, axis=0)

        np.testing.assert_array_equal(mask[:, 0], [1, 1, 0, 0])

    def test_k_equal_to_c_keeps_everything(self) -> None:
        """Test K equal to the candidate count."""
        mask = hard_topk_khot(np.random.default_rng(1).normal(size=(5, 3)), 3, 1)

        assert np.all(mask == 1)

    @pytest.mark.parametrize("k", [0, 6])
    def test_k_out_of_range(self, k: int) -> None:
        """Test K outside [1, C]."""
        with pytest.raises(MaskConfigError):
            hard_topk_khot(np.zeros(5), k, 0)

    def test_non_finite_logits(self) -> None:
        """Test that non-finite logits are rejected."""
        with pytest.raises(NonFiniteError):
            hard_topk_khot(np.array([0.0, np.inf, 1.0]), 1, 0)

    def test_noise_scale_outside_unit_interval(self) -> None:
        """Test a noise scale above 1."""
        with pytest.raises(MaskConfigError):
            GumbelNoiseField(noise=np.zeros(3), beta=1.5)

    def test_zero_noise_scale_is_deterministic(self) -> None:
        """Test top-K without noise."""
        rng = np.random.default_rng(2)
        logits = np.array([0.1, 3.0, -1.0, 2.0])
        noise = sample_gumbel(logits.shape, rng, beta=0.0, dtype=np.float64)

        mask = hard_topk_khot(noise.perturb(logits), 2, 0)

        np.testing.assert_array_equal(mask, [0, 1, 0, 1])


class TestRelaxedTopK:
    def _case(self, seed: int) -> Tuple[np.ndarray, GumbelNoiseField, np.ndarray]:
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(6, 3))
        noise = sample_gumbel(logits.shape, rng, dtype=np.float64)
        upstream = rng.normal(size=logits.shape)
        return logits, noise, upstream

    def test_hard_forward_and_soft_mass(self) -> None:
        """Test the hard forward value and the relaxed mass."""
        logits, noise, _ = self._case(0)

        hard, soft = relaxed_topk(Tensor(logits), noise, k=2, axis=0, tau=1.0)

        expected = hard_topk_khot(noise.perturb(logits), 2, 0)
        np.testing.assert_array_equal(hard.data, expected)
        np.testing.assert_allclose(soft.sum(axis=0), 2.0)
        assert np.all((soft >= 0.0) & (soft <= 2.0))

    @pytest.mark.parametrize("tau", [1.0, 5.0])
    def test_gradient_is_jacobian_of_relaxed_mask(self, tau: float) -> None:
        """Test the relaxed gradient against finite differences."""
        # Arrange
        logits, noise, upstream = self._case(1)
        param = Tensor(logits.copy(), requires_grad=True)

        # Act
        with Tape() as tape:
            hard, _ = relaxed_topk(param, noise, k=2, axis=0, tau=tau)
            loss = tensor_sum(elementwise_mul(hard, Tensor(upstream)))
        tape.backward(loss)

        # Assert
        def relaxed_value(point: np.ndarray) -> float:
            _, soft = relaxed_topk(Tensor(point), noise, k=2, axis=0, tau=tau)
            return float((soft * upstream).sum())

        expected = numerical_gradient(relaxed_value, logits.copy())
        assert relative_error(param.grad, expected) < 1e-3

    def test_rejects_non_positive_temperature(self) -> None:
        """Test a zero temperature."""
        logits, noise, _ = self._case(2)

        with pytest.raises(MaskConfigError):
            relaxed_topk(Tensor(logits), noise, k=1, axis=0, tau=0.0)

    def test_rejects_mismatched_noise(self) -> None:
        """Test noise shaped unlike the logits."""
        logits, _, _ = self._case(3)
        noise = GumbelNoiseField(noise=np.zeros((2, 2)))

        with pytest.raises(MaskConfigError):
            relaxed_topk(Tensor(logits), noise, k=1, axis=0, tau=1.0)

    def test_low_temperature_soft_mask_approaches_hard(self) -> None:
        """Test the relaxed mask at a low temperature."""
        logits = np.array([10.0, 5.0, 0.0, -5.0])
        noise = GumbelNoiseField(noise=np.zeros(4))

        hard, soft = relaxed_topk(Tensor(logits), noise, k=2, axis=0, tau=0.01)

        np.testing.assert_allclose(soft, hard.data, atol=1e-3)

    def test_permutation_equivariance(self) -> None:
        """Test that permuting candidates permutes the masks."""
        logits, noise, _ = self._case(4)
        perm = np.array([3, 0, 5, 1, 4, 2])
        permuted_noise = GumbelNoiseField(noise=noise.noise[perm])

        hard, soft = relaxed_topk(Tensor(logits), noise, k=3, axis=0, tau=2.0)
        hard_p, soft_p = relaxed_topk(
            Tensor(logits[perm]), permuted_noise, k=3, axis=0, tau=2.0
        )

        np.testing.assert_array_equal(hard_p.data, hard.data[perm])
        np.testing.assert_allclose(soft_p, soft[perm], rtol=1e-10, atol=1e-12)

    def test_keeping_every_candidate_gives_no_logit_gradient(self) -> None:
        """Test the constant mask when K equals C."""
        logits, noise, upstream = self._case(5)
        param = Tensor(logits.copy(), requires_grad=True)

        with Tape() as tape:
            hard, soft = relaxed_topk(param, noise, k=6, axis=0, tau=1.0)
            loss = tensor_sum(elementwise_mul(hard, Tensor(upstream, True)))
        tape.backward(loss)

        np.testing.assert_array_equal(hard.data, 1.0)
        np.testing.assert_array_equal(soft, 1.0)
        assert param.grad is None
