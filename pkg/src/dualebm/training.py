"""Alternating training of the energy model and the generator.

Each step draws a data minibatch and a generated minibatch, updates the
energy model with the positive/negative phase gradient, and (every
``dem_updates_per_dgm_update`` batches) updates the generator on a fresh
latent draw. Both models use AdaGrad. Gradients are checked for finiteness
before every update; a NaN aborts the run with the offending parameter and
step rather than being masked.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Parameter, Tape, sigmoid, softplus
from .energy_model import EnergyModel, dem_loss_gradient
from .generator_model import (
    GeneratorModel,
    dgm_loss_gradient,
    entropy_surrogate,
    sample_prior,
)

HISTORY_LEN = 256


class ConfigError(ValueError):
    """Invalid training configuration."""


class NonFiniteGradientError(RuntimeError):
    def __init__(self, param_name: str, step: Optional[int] = None):
        self.param_name = param_name
        self.step = step
        at = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite gradient for parameter {param_name!r}{at}")


@dataclass
class TrainConfig:
    batch_size: int = 64
    dem_lr: float = 0.01
    dgm_lr: float = 0.01
    adagrad_eps: float = 1e-8
    entropy_weight: float = 1.0
    steps: int = 20_000
    dem_updates_per_dgm_update: int = 1
    seed: int = 0
    checkpoint_interval: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.dem_lr <= 0 or self.dgm_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.adagrad_eps <= 0:
            raise ConfigError(f"adagrad_eps must be positive, got {self.adagrad_eps}")
        if self.entropy_weight < 0:
            raise ConfigError(
                f"entropy_weight must be >= 0, got {self.entropy_weight}")
        if self.steps < 1:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.dem_updates_per_dgm_update < 1:
            raise ConfigError("dem_updates_per_dgm_update must be positive")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")
        return self


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named substreams so components can be varied separately."""
    data_ss, prior_ss, init_ss = np.random.SeedSequence(seed).spawn(3)
    return {
        "data": np.random.default_rng(data_ss),
        "prior": np.random.default_rng(prior_ss),
        "init": np.random.default_rng(init_ss),
    }


class TrainState:
    """Step counter, AdaGrad accumulators, RNG streams and a metrics window."""

    def __init__(self, step=0, accumulators=None, data_rng=None,
                 prior_rng=None, history=None):
        self.step = step
        self.accumulators: dict[str, np.ndarray] = accumulators or {}
        self.data_rng = data_rng
        self.prior_rng = prior_rng
        self.history: deque = history if history is not None else deque(maxlen=HISTORY_LEN)

    @classmethod
    def initial(cls, seed: int) -> "TrainState":
        streams = rng_streams(seed)
        return cls(data_rng=streams["data"], prior_rng=streams["prior"])


def adagrad_step(params, grads, accumulators, lr, eps):
    """acc += g^2; param -= lr * g / (sqrt(acc) + eps), elementwise.

    Coordinates with g == 0 are left untouched even when acc and eps are
    both zero (the 0/0 case).
    """
    for p in params:
        g = grads[p.name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(p.name)
        acc = accumulators.get(p.name)
        if acc is None:
            acc = accumulators[p.name] = np.zeros_like(p.values)
        acc += g * g
        denom = np.sqrt(acc) + eps
        with np.errstate(invalid="ignore", divide="ignore"):
            p.values -= np.where(g == 0.0, 0.0, lr * g / denom)


def _grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def _format_metrics(metrics: dict) -> str:
    parts = [f"step={metrics['step']}"]
    parts += [f"{k}={v!r}" for k, v in metrics.items() if k != "step"]
    return " ".join(parts)


def train(dem: EnergyModel, gen: GeneratorModel, dataset, config: TrainConfig,
          state: Optional[TrainState] = None, metrics_out=None,
          checkpoint_fn=None) -> TrainState:
    """Run the dual loop until ``state.step`` reaches ``config.steps``.

    dataset is anything with a ``points`` array (or the array itself); it is
    never mutated. One line of ``key=value`` metrics per step goes to
    ``metrics_out`` when given. ``checkpoint_fn(state)`` fires every
    ``checkpoint_interval`` steps. Returns the final state; models are
    updated in place.
    """
    config.validate()
    points = np.asarray(getattr(dataset, "points", dataset), dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ConfigError(f"dataset must be a nonempty (n, d) array, got {points.shape}")
    if state is None:
        state = TrainState.initial(config.seed)
    n = config.batch_size
    while state.step < config.steps:
        try:
            idx = state.data_rng.integers(0, points.shape[0], size=n)
            x_pos = points[idx]
            z = sample_prior(n, gen.d_z, state.prior_rng)
            x_neg = gen.generate(z, "train")
            dem_grads, dem_stats = dem_loss_gradient(dem, x_pos, x_neg)
            adagrad_step(dem.params(), dem_grads, state.accumulators,
                         config.dem_lr, config.adagrad_eps)
            metrics = {
                "step": state.step,
                "e_pos": dem_stats["e_pos"],
                "e_neg": dem_stats["e_neg"],
                "dem_gnorm": _grad_norm(dem_grads),
            }
            if (state.step + 1) % config.dem_updates_per_dgm_update == 0:
                z2 = sample_prior(n, gen.d_z, state.prior_rng)
                dgm_grads, dgm_stats = dgm_loss_gradient(
                    gen, dem, z2, config.entropy_weight)
                adagrad_step(gen.params(), dgm_grads, state.accumulators,
                             config.dgm_lr, config.adagrad_eps)
                metrics["e_gen"] = dgm_stats["e_gen"]
                metrics["entropy"] = dgm_stats["entropy"]
                metrics["dgm_gnorm"] = _grad_norm(dgm_grads)
        except NonFiniteGradientError as err:
            raise NonFiniteGradientError(err.param_name, step=state.step) from None
        state.step += 1
        state.history.append(metrics)
        if metrics_out is not None:
            metrics_out.write(_format_metrics(metrics) + "\n")
        if (checkpoint_fn is not None and config.checkpoint_interval > 0
                and state.step % config.checkpoint_interval == 0
                and state.step < config.steps):
            checkpoint_fn(state)
    return state


def _flat_params_grad(model: EnergyModel) -> np.ndarray:
    return np.concatenate([p.grad.ravel() for p in model.params()])


def classifier_view_check(dem: EnergyModel, x_pos: np.ndarray,
                          x_neg: np.ndarray) -> dict:
    """Compare the exact data-vs-model classifier gradient to the unweighted
    quarter-difference of phase gradients.

    The classifier says P(real | x) = sigmoid(-E(x)); its expected negative
    conditional log-likelihood is

        0.5 * mean(softplus(E(x_pos))) + 0.5 * mean(softplus(-E(x_neg)))

    whose gradient weights each sample by the probability the classifier
    assigns to the *other* class. When those weights all sit at 1/2 (the
    hard-to-discriminate regime), the exact gradient collapses to
    0.25 * (positive phase - negative phase).
    """
    x_pos = np.asarray(x_pos, dtype=np.float64)
    x_neg = np.asarray(x_neg, dtype=np.float64)
    if x_pos.shape[0] != x_neg.shape[0]:
        raise ValueError(
            f"batch sizes differ: {x_pos.shape[0]} vs {x_neg.shape[0]}")

    tape = Tape()
    e_pos = dem.energy(tape.constant(x_pos))
    e_neg = dem.energy(tape.constant(x_neg))
    nll = 0.5 * (softplus(e_pos).mean() + softplus(-e_neg).mean())
    tape.backward(nll)
    exact = _flat_params_grad(dem)
    weights_pos = sigmoid(e_pos).values        # P(fake | x_pos)
    weights_neg = sigmoid(-e_neg).values       # P(real | x_neg)

    tape = Tape()
    approx_root = 0.25 * (dem.energy(tape.constant(x_pos)).mean()
                          - dem.energy(tape.constant(x_neg)).mean())
    tape.backward(approx_root)
    approx = _flat_params_grad(dem)

    exact_norm = float(np.linalg.norm(exact))
    approx_norm = float(np.linalg.norm(approx))
    if exact_norm == 0.0 or approx_norm == 0.0:
        cosine = 1.0 if exact_norm == approx_norm else 0.0
    else:
        cosine = float(exact @ approx / (exact_norm * approx_norm))
    return {
        "exact_grad": exact,
        "approx_grad": approx,
        "cosine": cosine,
        "ratio": exact_norm / approx_norm if approx_norm else float("inf"),
        "weights_pos": weights_pos,
        "weights_neg": weights_neg,
        "nll": float(nll.values),
    }
