"""Closed-form expert energies and their product-of-experts aggregation.

Each expert maps a batch of inputs to one nonnegative-or-free energy value
per row; the product-of-experts density is the normalized product of the
per-expert unnormalized densities, so its energy is just the sum of the
expert energies. Everything is built from tape primitives, so gradients
come from the backward pass rather than hand-written derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter

POT = "pot"
LOGISTIC = "logistic"
RBM_FREE_ENERGY = "rbm_free_energy"
_KINDS = (POT, LOGISTIC, RBM_FREE_ENERGY)


@dataclass
class ExpertBank:
    """A set of linear feature detectors sharing one energy form.

    w has shape (d_in, n_experts); b and alpha have shape (n_experts,).
    alpha is only meaningful for the Student-t form and must stay strictly
    positive for the unnormalized densities to be proper.
    """

    kind: str
    w: Parameter
    b: Optional[Parameter] = None
    alpha: Optional[Parameter] = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown expert kind {self.kind!r}")
        if self.kind == POT:
            if self.alpha is None:
                raise ValueError("Student-t experts need alpha")
            _check_alpha(self.alpha.values)

    @property
    def n_experts(self) -> int:
        return self.w.values.shape[1]


def _check_alpha(alpha: np.ndarray) -> None:
    if np.any(alpha <= 0):
        raise ValueError("Student-t tail weights alpha must be strictly positive")


def poe_energy(expert_energies: Sequence[Node]) -> Node:
    """Sum of per-expert energies: the energy of the product distribution."""
    if len(expert_energies) == 0:
        raise ValueError("poe_energy needs at least one expert energy")
    total = expert_energies[0]
    for e in expert_energies[1:]:
        total = total + e
    return total


def pot_energy(x: Node, bank: ExpertBank) -> Node:
    """Student-t expert energy: sum_i alpha_i * log(1 + (w_i . x)^2) per row."""
    if bank.kind != POT:
        raise ValueError(f"pot_energy needs a {POT!r} bank, got {bank.kind!r}")
    tape = x.tape
    _check_alpha(bank.alpha.values)
    u = x @ tape.watch(bank.w)
    per_expert = ad.log(ad.square(u) + 1.0) * tape.watch(bank.alpha)
    return per_expert.sum(axis=1)


def logistic_energy(x: Node, bank: ExpertBank) -> Node:
    """Weak-classifier energy: sum_i softplus(-(w_i . x + b_i)) per row.

    Equals -sum_i log sigmoid(w_i . x + b_i) exactly, so each expert is the
    negative log-probability of a logistic detector firing.
    """
    if bank.kind != LOGISTIC:
        raise ValueError(f"logistic_energy needs a {LOGISTIC!r} bank, got {bank.kind!r}")
    tape = x.tape
    u = x @ tape.watch(bank.w) + tape.watch(bank.b)
    return ad.softplus(-u).sum(axis=1)


def rbm_free_energy(x: Node, bank: ExpertBank, sigma: float,
                    b_vis: Parameter) -> Node:
    """Free energy over Gaussian visible units with binary hidden experts.

    (1/sigma^2) x.x - b_vis.x - sum_i log(1 + exp(w_i . x + b_i)) per row;
    the log term is the binary hidden unit summed out, and the quadratic
    term dominates for large ||x|| so exp(-energy) stays integrable.
    """
    if bank.kind != RBM_FREE_ENERGY:
        raise ValueError(
            f"rbm_free_energy needs a {RBM_FREE_ENERGY!r} bank, got {bank.kind!r}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    tape = x.tape
    quadratic = ad.square(x).sum(axis=1) * (1.0 / sigma**2)
    mean_term = (x * tape.watch(b_vis)).sum(axis=1)
    u = x @ tape.watch(bank.w) + tape.watch(bank.b)
    hidden_term = ad.softplus(u).sum(axis=1)
    return quadratic - mean_term - hidden_term
