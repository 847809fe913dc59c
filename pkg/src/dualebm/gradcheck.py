"""Finite-difference gradient checking.

The oracle only ever calls the loss forward, so it is independent of the
tape's backward pass. ``worst_relative_error`` guards the denominator with
max(1, |analytic|, |numeric|): plain relative error for O(1) gradients,
absolute error for vanishing ones.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .autodiff import Parameter

FD_STEP = 1e-5


def finite_difference(loss_fn: Callable[[], float],
                      params: Iterable[Parameter],
                      step: float = FD_STEP) -> dict[str, np.ndarray]:
    """Central differences of a scalar loss over every parameter coordinate."""
    out = {}
    for p in params:
        grad = np.zeros_like(p.values)
        flat_values = p.values.ravel()
        flat_grad = grad.ravel()
        for j in range(flat_values.size):
            orig = flat_values[j]
            flat_values[j] = orig + step
            up = loss_fn()
            flat_values[j] = orig - step
            down = loss_fn()
            flat_values[j] = orig
            flat_grad[j] = (up - down) / (2.0 * step)
        out[p.name] = grad
    return out


def worst_relative_error(analytic: Mapping[str, np.ndarray],
                         numeric: Mapping[str, np.ndarray]) -> tuple[float, str]:
    """Largest guarded relative error across all coordinates, with its owner."""
    worst = 0.0
    owner = ""
    for name, a in analytic.items():
        f = numeric[name]
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(f)))
        err = np.abs(a - f) / denom
        peak = float(err.max()) if err.size else 0.0
        if peak >= worst:
            worst = peak
            owner = name
    return worst, owner


def check_gradients(loss_fn: Callable[[], float],
                    analytic: Mapping[str, np.ndarray],
                    params: Iterable[Parameter],
                    step: float = FD_STEP) -> tuple[float, str]:
    numeric = finite_difference(loss_fn, params, step=step)
    return worst_relative_error(analytic, numeric)


GRADCHECK_TOLERANCE = 1e-4


def run_gradcheck(seed: int = 0, scale: float = 1.0,
                  batch: int = 8) -> tuple[float, dict[str, float]]:
    """Check every parameter of a small random model pair against central
    differences, through both training losses.

    Covers the energy model's two-phase loss and the generator loss that
    back-propagates through the energy function and the entropy surrogate.
    Returns the worst guarded relative error and the per-loss breakdown.
    """
    from .energy_model import EnergyModel, dem_loss_gradient
    from .generator_model import GeneratorModel, dgm_loss_gradient, sample_prior

    rng = np.random.default_rng(seed)
    dem = EnergyModel.build((2, 16, 4), 4, rng, init_scale=scale)
    gen = GeneratorModel.build((4, 16, 2), rng, init_scale=scale)
    x_pos = rng.normal(size=(batch, 2))
    x_neg = rng.normal(size=(batch, 2))
    z = sample_prior(batch, 4, rng)

    dem_analytic, _ = dem_loss_gradient(dem, x_pos, x_neg)

    def dem_loss():
        from .autodiff import Tape
        tape = Tape()
        root = (dem.energy(tape.constant(x_pos)).mean()
                - dem.energy(tape.constant(x_neg)).mean())
        return float(root.values)

    worst_dem, _ = check_gradients(dem_loss, dem_analytic, dem.params())

    dgm_analytic, _ = dgm_loss_gradient(gen, dem, z, entropy_weight=1.0)

    def dgm_loss():
        from .autodiff import Tape
        from .generator_model import entropy_surrogate_node
        tape = Tape()
        tape.freeze(dem.params())
        x = gen.generate_node(tape.constant(z), "train")
        root = dem.energy(x).mean() - entropy_surrogate_node(gen, tape)
        return float(root.values)

    worst_dgm, _ = check_gradients(dgm_loss, dgm_analytic, gen.params())

    breakdown = {"dem_loss": worst_dem, "dgm_loss": worst_dgm}
    return max(worst_dem, worst_dgm), breakdown
