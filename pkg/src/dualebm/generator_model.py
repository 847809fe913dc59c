"""Deep generative model: deterministic network over a uniform latent prior.

Sampling is ancestral and non-iterative: draw z ~ U(-1,1)^d_z, push it
through the network, done. The conditional P(x|z) is a Dirac delta, so all
sample variability comes from the prior and from how much the network
stretches it. Hidden layers carry batch normalization whose per-unit scale
parameters double as the handle for an entropy surrogate: treating each
normalized activation as Gaussian with scale sigma_a, the summed entropy
0.5*log(2*e*pi*sigma_a^2) rewards larger scales and counteracts the
collapse of all samples onto a few energy minima.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Node, Parameter, ShapeError, Tape

LOG_2PIE = math.log(2.0 * math.pi * math.e)


class GenLayer:
    def __init__(self, w, b, bn_shift=None, bn_scale=None, bn_state=None,
                 activation="linear"):
        self.w = w
        self.b = b
        self.bn_shift = bn_shift
        self.bn_scale = bn_scale
        self.bn_state = bn_state
        self.activation = activation

    @property
    def has_batch_norm(self) -> bool:
        return self.bn_scale is not None


class GeneratorModel:
    def __init__(self, layers, d_z, widths, batch_norm_hidden,
                 hidden_activation, output_activation):
        self.layers = list(layers)
        self.d_z = int(d_z)
        self.widths = tuple(widths)
        self.batch_norm_hidden = batch_norm_hidden
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation

    @classmethod
    def build(cls, widths, rng, batch_norm_hidden=True,
              hidden_activation="tanh", output_activation="linear",
              init_scale=1.0):
        """widths runs latent -> hidden... -> data, e.g. (4, 128, 128, 2).

        Hidden layers get batch norm (affine, normalize, activate); the
        output layer never does.
        """
        if len(widths) < 2:
            raise ValueError("need at least a latent and an output width")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = init_scale / np.sqrt(fan_in)
            w = Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                          f"gen.layer{i}.w")
            b = Parameter(np.zeros(fan_out), f"gen.layer{i}.b")
            last = i == len(widths) - 2
            if last or not batch_norm_hidden:
                layers.append(GenLayer(
                    w, b, activation=output_activation if last else hidden_activation))
            else:
                layers.append(GenLayer(
                    w, b,
                    bn_shift=Parameter(np.zeros(fan_out), f"gen.layer{i}.bn_shift"),
                    bn_scale=Parameter(np.ones(fan_out), f"gen.layer{i}.bn_scale"),
                    bn_state=BatchNormState.initial(fan_out),
                    activation=hidden_activation))
        return cls(layers, widths[0], widths, batch_norm_hidden,
                   hidden_activation, output_activation)

    @property
    def d_out(self) -> int:
        return self.widths[-1]

    def params(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out.append(layer.w)
            out.append(layer.b)
            if layer.has_batch_norm:
                out.append(layer.bn_shift)
                out.append(layer.bn_scale)
        return out

    def scale_parameters(self) -> list[Parameter]:
        return [l.bn_scale for l in self.layers if l.has_batch_norm]

    def generate_node(self, z: Node, mode: str) -> Node:
        """Forward pass on the caller's tape; mode picks batch-norm statistics.

        Batch norm runs after the bounded activation, so each scale
        parameter multiplies a hidden feature directly. A scale pushed up
        by the entropy term then actually widens the sample distribution
        instead of disappearing into a saturated nonlinearity.
        """
        if z.values.ndim != 2 or z.values.shape[1] != self.d_z:
            raise ShapeError(
                f"expected latents of shape (batch, {self.d_z}), got {z.values.shape}")
        tape = z.tape
        h = z
        for layer in self.layers:
            h = h @ tape.watch(layer.w) + tape.watch(layer.b)
            h = ad.apply_activation(layer.activation, h)
            if layer.has_batch_norm:
                h = ad.batch_norm(h, tape.watch(layer.bn_shift),
                                  tape.watch(layer.bn_scale),
                                  layer.bn_state, mode)
        return h

    def generate(self, z: np.ndarray, mode: str = "infer") -> np.ndarray:
        """Samples as a plain array; infer mode is free of side effects."""
        tape = Tape()
        return self.generate_node(tape.constant(z), mode).values


def sample_prior(n: int, d_z: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. uniform(-1, 1) latent rows, reproducible from the generator."""
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    return rng.uniform(-1.0, 1.0, size=(n, d_z))


def _check_scales(model: GeneratorModel) -> list[Parameter]:
    scales = model.scale_parameters()
    for p in scales:
        if np.any(p.values == 0.0):
            raise ValueError(
                f"entropy surrogate is singular: {p.name} contains a zero scale")
    return scales


def entropy_surrogate(model: GeneratorModel) -> float:
    """Sum of 0.5*log(2*e*pi*sigma_a^2) over all batch-norm scale entries."""
    total = 0.0
    for p in _check_scales(model):
        total += float(np.sum(0.5 * (LOG_2PIE + np.log(p.values**2))))
    return total


def entropy_surrogate_node(model: GeneratorModel, tape: Tape) -> Node:
    """Tape version of the surrogate; gradient w.r.t. each scale is 1/scale."""
    scales = _check_scales(model)
    terms = None
    for p in scales:
        s = tape.watch(p)
        term = (ad.log(ad.square(s)) + LOG_2PIE).sum() * 0.5
        terms = term if terms is None else terms + term
    if terms is None:
        return tape.constant(0.0)
    return terms


def dgm_loss_gradient(gen: GeneratorModel, dem, z: np.ndarray,
                      entropy_weight: float) -> tuple[dict, dict]:
    """Gradient of mean(E(G(z))) - entropy_weight * surrogate over generator
    parameters, with the energy model's parameters held constant.

    Back-propagates through the energy function into the generator; the
    energy model sees only values, never gradient, on this tape.
    """
    if entropy_weight < 0:
        raise ValueError(f"entropy_weight must be >= 0, got {entropy_weight}")
    tape = Tape()
    tape.freeze(dem.params())
    x = gen.generate_node(tape.constant(z), "train")
    e_gen = dem.energy(x).mean()
    if entropy_weight > 0:
        loss = e_gen - entropy_weight * entropy_surrogate_node(gen, tape)
    else:
        loss = e_gen
    tape.backward(loss)
    grads = {p.name: p.grad.copy() for p in gen.params()}
    stats = {"e_gen": float(e_gen.values), "entropy": entropy_surrogate(gen)}
    return grads, stats
