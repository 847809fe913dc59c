import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from dualebm.autodiff import ShapeError, Tape
from dualebm.energy_model import (
    EnergyModel,
    dem_loss_gradient,
    grid_log_density,
    log_partition,
    log_partition_oracle,
)
from dualebm.gradcheck import finite_difference

from helpers import assert_grads_match


def _zeroed(model):
    for p in model.params():
        p.values[:] = 0.0
    return model


def _quadratic_model(sigma=1.0, n_experts=0):
    """Zero parameters: energy reduces to x.x/sigma^2 - n_experts*log 2."""
    rng = np.random.default_rng(0)
    return _zeroed(EnergyModel.build((2, 4, 4), n_experts, rng, sigma=sigma))


def test_features_zero_parameters_sigmoid_gives_half():
    model = _zeroed(EnergyModel.build((2, 4, 3), 2, np.random.default_rng(0)))
    tape = Tape()
    f = model.features(tape.constant(np.random.default_rng(1).normal(size=(5, 2))))
    assert_allclose(f.values, 0.5 * np.ones((5, 3)))


def test_features_identical_rows_identical_outputs():
    model = EnergyModel.build((2, 8, 3), 2, np.random.default_rng(2))
    x = np.array([[0.3, -1.2]])
    batch = np.repeat(x, 4, axis=0)
    tape = Tape()
    f = model.features(tape.constant(batch)).values
    assert np.array_equal(f, np.repeat(f[:1], 4, axis=0))


def test_features_bounded_on_extreme_inputs():
    model = EnergyModel.build((2, 16, 4), 4, np.random.default_rng(3))
    x = np.random.default_rng(4).uniform(-100.0, 100.0, size=(10_000, 2))
    tape = Tape()
    f = model.features(tape.constant(x)).values
    assert np.all(f >= 0.0) and np.all(f <= 1.0)


def test_features_rejects_wrong_width():
    model = EnergyModel.build((2, 4, 3), 2, np.random.default_rng(5))
    tape = Tape()
    with pytest.raises(ShapeError, match=r"\(batch, 2\)"):
        model.features(tape.constant(np.zeros((3, 5))))


def test_energy_zero_parameters_closed_form():
    model = _quadratic_model(n_experts=4)
    e = model.energy_values(np.zeros((1, 2)))
    assert_allclose(e, [-4.0 * math.log(2.0)], rtol=1e-12)
    assert_allclose(e, [-2.772589], atol=1e-6)


def test_energy_difference_is_quadratic_term():
    model = _quadratic_model(n_experts=4)
    e = model.energy_values(np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert_allclose(e[0] - e[1], 1.0, rtol=1e-12)


def test_unnormalized_density_integrates_stably():
    model = EnergyModel.build((2, 8, 4), 4, np.random.default_rng(6))
    bounds = [(-20.0, 20.0), (-20.0, 20.0)]
    coarse = log_partition_oracle(model, bounds, 200)
    fine = log_partition_oracle(model, bounds, 400)
    assert np.isfinite(coarse) and np.isfinite(fine)
    assert abs(fine - coarse) < 1e-3 * abs(fine)


def test_energy_batch_permutation_equivariance():
    model = EnergyModel.build((2, 8, 4), 4, np.random.default_rng(7))
    x = np.random.default_rng(8).normal(size=(16, 2))
    perm = np.random.default_rng(9).permutation(16)
    assert_allclose(model.energy_values(x)[perm], model.energy_values(x[perm]),
                    rtol=1e-12)


# --- maximum-likelihood-style gradient -----------------------------------------

def test_identical_phases_cancel_exactly():
    model = EnergyModel.build((2, 4, 3), 3, np.random.default_rng(10))
    x = np.random.default_rng(11).normal(size=(8, 2))
    grads, stats = dem_loss_gradient(model, x, x.copy())
    assert stats["e_pos"] == stats["e_neg"]
    for g in grads.values():
        assert np.all(g == 0.0)


def test_dem_loss_gradient_rejects_batch_mismatch():
    model = EnergyModel.build((2, 4, 3), 3, np.random.default_rng(12))
    with pytest.raises(ValueError, match="batch sizes differ"):
        dem_loss_gradient(model, np.zeros((4, 2)), np.zeros((5, 2)))


def test_dem_loss_gradient_matches_finite_differences():
    model = EnergyModel.build((2, 4, 2), 2, np.random.default_rng(13))
    rng = np.random.default_rng(14)
    x_pos = rng.normal(size=(8, 2))
    x_neg = rng.normal(size=(8, 2))

    def loss():
        tape = Tape()
        root = (model.energy(tape.constant(x_pos)).mean()
                - model.energy(tape.constant(x_neg)).mean())
        return float(root.values)

    analytic, _ = dem_loss_gradient(model, x_pos, x_neg)
    numeric = finite_difference(loss, model.params())
    assert_grads_match(analytic, numeric, rtol=1e-5)


def test_one_gradient_step_separates_phases():
    model = EnergyModel.build((2, 8, 4), 4, np.random.default_rng(15))
    rng = np.random.default_rng(16)
    x_pos = rng.normal(size=(32, 2)) * 0.1 - 1.0
    x_neg = rng.normal(size=(32, 2)) * 0.1 + 1.0
    before_pos = model.energy_values(x_pos).mean()
    before_neg = model.energy_values(x_neg).mean()
    grads, _ = dem_loss_gradient(model, x_pos, x_neg)
    for p in model.params():
        p.values -= 1e-3 * grads[p.name]
    assert model.energy_values(x_pos).mean() < before_pos
    assert model.energy_values(x_neg).mean() > before_neg


def test_negative_phase_estimator_averages_toward_large_batch():
    """Mean of per-batch gradient estimates approaches the huge-batch value.

    Quadrupling the number of averaged batches should roughly halve the
    estimation error (Monte Carlo 1/sqrt(N) behavior).
    """
    from dualebm.generator_model import GeneratorModel, sample_prior

    model = EnergyModel.build((2, 8, 4), 4, np.random.default_rng(17))
    gen = GeneratorModel.build((3, 8, 2), np.random.default_rng(18))

    def neg_phase_grad(z):
        tape = Tape()
        root = model.energy(tape.constant(gen.generate(z, "infer"))).mean()
        tape.backward(root)
        return np.concatenate([p.grad.ravel() for p in model.params()])

    rng = np.random.default_rng(19)
    reference = neg_phase_grad(sample_prior(200_000, 3, rng))

    def averaged_error(n_batches, rng):
        total = np.zeros_like(reference)
        for _ in range(n_batches):
            total += neg_phase_grad(sample_prior(64, 3, rng))
        return np.linalg.norm(total / n_batches - reference)

    err_small = averaged_error(4, np.random.default_rng(20))
    err_large = averaged_error(64, np.random.default_rng(21))
    assert err_large < 0.6 * err_small


# --- partition quadrature --------------------------------------------------------

def test_log_partition_recovers_gaussian_integral():
    model = _quadratic_model(sigma=1.0, n_experts=0)
    log_z = log_partition_oracle(model, [(-6.0, 6.0), (-6.0, 6.0)], 400)
    assert abs(log_z - math.log(math.pi)) < 1e-3


def test_log_partition_grid_refinement_converges():
    model = _quadratic_model(sigma=1.0, n_experts=0)
    bounds = [(-6.0, 6.0), (-6.0, 6.0)]
    assert abs(log_partition_oracle(model, bounds, 800)
               - log_partition_oracle(model, bounds, 400)) < 1e-4


def test_log_partition_constant_shift_identity():
    model = _quadratic_model(n_experts=0)
    bounds = [(-6.0, 6.0), (-6.0, 6.0)]
    base = log_partition(model.energy_values, bounds, 200)
    for c in (-3.0, 0.5, 10.0):
        shifted = log_partition(lambda x, c=c: model.energy_values(x) + c,
                                bounds, 200)
        assert_allclose(shifted, base - c, rtol=1e-12)


def test_log_partition_one_dimensional():
    log_z = log_partition(lambda x: (x[:, 0] ** 2), [(-8.0, 8.0)], 2000)
    assert abs(log_z - 0.5 * math.log(math.pi)) < 1e-6


def test_log_partition_rejects_high_dimension():
    model = EnergyModel.build((3, 4, 2), 2, np.random.default_rng(22))
    with pytest.raises(ValueError, match="d_in <= 2"):
        log_partition_oracle(model, [(-1, 1)] * 3, 10)


def test_grid_density_sums_to_one():
    model = EnergyModel.build((2, 8, 4), 4, np.random.default_rng(23))
    _, log_p, _, _ = grid_log_density(model.energy_values,
                                      [(-6.0, 6.0), (-6.0, 6.0)], 150)
    assert_allclose(np.exp(log_p).sum(), 1.0, atol=1e-12)
