"""Deep energy model: bounded feature extractor feeding expert energies.

The energy of a configuration x is

    (1/sigma^2) x.x  -  b_vis.x  -  sum_i softplus(w_i . f(x) + b_i)

where f is a deterministic multilayer net whose final activation is bounded
(sigmoid or tanh). Each expert term grows at most linearly in ||x|| while
the quadratic term dominates, so exp(-energy) is integrable and the model
defines a proper unnormalized density. sigma is a fixed hyperparameter,
not trained.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Node, Parameter, ShapeError, Tape

BOUNDED_ACTIVATIONS = ("sigmoid", "tanh")


class EnergyModel:
    def __init__(self, weights, biases, activations, expert_w, expert_b,
                 b_vis, sigma, widths, hidden_activation, final_activation):
        self.weights = list(weights)
        self.biases = list(biases)
        self.activations = list(activations)
        self.expert_w = expert_w
        self.expert_b = expert_b
        self.b_vis = b_vis
        if sigma <= 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        self.sigma = float(sigma)
        self.widths = tuple(widths)
        self.hidden_activation = hidden_activation
        self.final_activation = final_activation

    @classmethod
    def build(cls, widths, n_experts, rng, sigma=1.0, hidden_activation="tanh",
              final_activation="sigmoid", init_scale=1.0):
        """Random model: fan-in uniform feature weights, small uniform experts.

        widths runs input -> hidden... -> feature dimension, e.g. (2, 128,
        128, 4). The final activation must be bounded so the energy stays
        integrable.
        """
        if len(widths) < 2:
            raise ValueError("need at least an input and a feature width")
        if final_activation not in BOUNDED_ACTIVATIONS:
            raise ValueError(
                f"final feature activation must be bounded, got {final_activation!r}")
        weights, biases, activations = [], [], []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = init_scale / np.sqrt(fan_in)
            weights.append(Parameter(
                rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                f"dem.layer{i}.w"))
            biases.append(Parameter(np.zeros(fan_out), f"dem.layer{i}.b"))
            last = i == len(widths) - 2
            activations.append(final_activation if last else hidden_activation)
        d_feat = widths[-1]
        expert_w = Parameter(
            rng.uniform(-0.1 * init_scale, 0.1 * init_scale, size=(d_feat, n_experts)),
            "dem.expert_w")
        expert_b = Parameter(np.zeros(n_experts), "dem.expert_b")
        b_vis = Parameter(np.zeros(widths[0]), "dem.b_vis")
        return cls(weights, biases, activations, expert_w, expert_b, b_vis,
                   sigma, widths, hidden_activation, final_activation)

    @property
    def d_in(self) -> int:
        return self.widths[0]

    @property
    def n_experts(self) -> int:
        return self.expert_w.values.shape[1]

    def params(self) -> list[Parameter]:
        return (self.weights + self.biases
                + [self.expert_w, self.expert_b, self.b_vis])

    def _check_width(self, x: Node) -> None:
        if x.values.ndim != 2 or x.values.shape[1] != self.d_in:
            raise ShapeError(
                f"expected input of shape (batch, {self.d_in}), "
                f"got {x.values.shape}")

    def features(self, x: Node) -> Node:
        """Deterministic forward pass through the feature net."""
        self._check_width(x)
        tape = x.tape
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = ad.apply_activation(act, h @ tape.watch(w) + tape.watch(b))
        return h

    def energy(self, x: Node) -> Node:
        """Per-row energy; low values mark configurations the model favors."""
        self._check_width(x)
        tape = x.tape
        f = self.features(x)
        quadratic = ad.square(x).sum(axis=1) * (1.0 / self.sigma**2)
        mean_term = (x * tape.watch(self.b_vis)).sum(axis=1)
        u = f @ tape.watch(self.expert_w) + tape.watch(self.expert_b)
        return quadratic - mean_term - ad.softplus(u).sum(axis=1)

    def energy_values(self, x: np.ndarray, chunk: int = 8192) -> np.ndarray:
        """Energies of a plain array, evaluated on throwaway tapes."""
        x = np.asarray(x, dtype=np.float64)
        out = np.empty(x.shape[0])
        for start in range(0, x.shape[0], chunk):
            tape = Tape()
            block = x[start:start + chunk]
            out[start:start + chunk] = self.energy(tape.constant(block)).values
        return out


def dem_loss_gradient(model: EnergyModel, x_pos: np.ndarray,
                      x_neg: np.ndarray) -> tuple[dict, dict]:
    """Gradient of mean(E(x_pos)) - mean(E(x_neg)) over the model parameters.

    x_neg must arrive as a plain array (generated samples are detached: the
    generator that produced them gets no gradient from this loss). Returns
    the per-parameter gradients and the phase statistics for metrics.
    """
    x_pos = np.asarray(x_pos, dtype=np.float64)
    x_neg = np.asarray(x_neg, dtype=np.float64)
    if x_pos.shape[0] != x_neg.shape[0]:
        raise ValueError(
            f"positive and negative batch sizes differ: {x_pos.shape[0]} vs "
            f"{x_neg.shape[0]}")
    tape = Tape()
    e_pos = model.energy(tape.constant(x_pos)).mean()
    e_neg = model.energy(tape.constant(x_neg)).mean()
    loss = e_pos - e_neg
    tape.backward(loss)
    grads = {p.name: p.grad.copy() for p in model.params()}
    stats = {"e_pos": float(e_pos.values), "e_neg": float(e_neg.values)}
    return grads, stats


def log_partition(energy_fn, bounds, grid_n: int) -> float:
    """log of the trapezoidal quadrature of exp(-energy) over a grid.

    bounds is one (lo, hi) pair per dimension, at most two dimensions.
    Summation happens in log space, so arbitrarily large energies are safe.
    """
    bounds = [tuple(map(float, b)) for b in bounds]
    if not 1 <= len(bounds) <= 2:
        raise ValueError(
            f"quadrature supports 1 or 2 dimensions, got {len(bounds)}")
    if grid_n < 2:
        raise ValueError("grid_n must be at least 2")
    axes, weights = [], []
    for lo, hi in bounds:
        axes.append(np.linspace(lo, hi, grid_n))
        w = np.full(grid_n, (hi - lo) / (grid_n - 1))
        w[0] *= 0.5
        w[-1] *= 0.5
        weights.append(w)
    if len(bounds) == 1:
        points = axes[0][:, None]
        log_w = np.log(weights[0])
    else:
        gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
        points = np.column_stack([gx.ravel(), gy.ravel()])
        log_w = (np.log(weights[0])[:, None] + np.log(weights[1])[None, :]).ravel()
    energies = np.asarray(energy_fn(points), dtype=np.float64)
    return float(logsumexp(-energies + log_w))


def log_partition_oracle(model: EnergyModel, bounds, grid_n: int) -> float:
    """Brute-force log Z for low-dimensional models; test and metric use only."""
    if model.d_in > 2:
        raise ValueError(
            f"partition quadrature only supports d_in <= 2, model has {model.d_in}")
    return log_partition(model.energy_values, bounds, grid_n)


def trapezoid_grid(bounds, grid_n: int):
    """2D quadrature nodes and per-node log-weights (trapezoid rule)."""
    bounds = [tuple(map(float, b)) for b in bounds]
    axes, weights = [], []
    for lo, hi in bounds:
        axes.append(np.linspace(lo, hi, grid_n))
        w = np.full(grid_n, (hi - lo) / (grid_n - 1))
        w[0] *= 0.5
        w[-1] *= 0.5
        weights.append(w)
    gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
    points = np.column_stack([gx.ravel(), gy.ravel()])
    log_w = (np.log(weights[0])[:, None] + np.log(weights[1])[None, :]).ravel()
    return points, log_w


def grid_log_density(energy_fn, bounds, grid_n: int):
    """Grid points, normalized log-probability mass per node, and log Z.

    The masses include the quadrature weights, so they sum to one over the
    grid and behave like a discrete distribution.
    """
    points, log_w = trapezoid_grid(bounds, grid_n)
    energies = np.asarray(energy_fn(points), dtype=np.float64)
    log_unnorm = -energies + log_w
    log_z = float(logsumexp(log_unnorm))
    return points, log_unnorm - log_z, log_z, log_w
