"""The smooth ReLU-to-polynomial transition schedule."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

from .activations import Activation, ActivationKind, PolyCoeffs
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class TransitionSchedule:
    """Pure ReLU through epoch ``start_epoch``, then a linear ramp over ``duration`` epochs."""

    start_epoch: int = 3
    duration: int = 10

    def __post_init__(self):
        if int(self.start_epoch) != self.start_epoch or self.start_epoch < 0:
            raise ConfigError(f"start_epoch must be a non-negative integer, got {self.start_epoch!r}")
        if int(self.duration) != self.duration or self.duration < 1:
            raise ConfigError(f"duration must be a positive integer, got {self.duration!r}")

    def __call__(self, epoch: int) -> float:
        return lambda_at_epoch(self, epoch)


def lambda_at_epoch(s: TransitionSchedule, e: int) -> float:
    if e < 0:
        raise ContractError(f"epoch must be non-negative, got {e}")
    k = e - s.start_epoch
    if k <= 0:
        return 0.0
    if k < s.duration:
        return k / s.duration
    return 1.0


def step_lambda(s: TransitionSchedule, e: int) -> float:
    """Replace everything at once: 0 before ``start_epoch``, 1 from it on."""
    if e < 0:
        raise ContractError(f"epoch must be non-negative, got {e}")
    return 1.0 if e >= s.start_epoch else 0.0


def apply_transition(model, lam: float, init: str = "relu_like"):
    """Set every activation layer of ``model`` to the blend weight ``lam``.

    Rewrites in place and returns ``model`` so that coefficient tensors keep
    their identity (and optimizer state) across epochs. ReLU layers pick up
    fresh coefficients from ``init`` the first time they are touched.
    """
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"blend weight must lie in [0, 1], got {lam}")
    nodes = model.activation_nodes()
    if not nodes:
        warnings.warn(f"model {model.name!r} has no activation layers; transition is a no-op")
        return model
    for node in nodes:
        act = node.activation
        if act.kind not in (ActivationKind.RELU, ActivationKind.WEIGHTED, ActivationKind.TRAINABLE_POLY):
            raise ContractError(f"{node.name}: cannot transition a {act.kind.value} activation")
        coeffs = act.coeffs if act.coeffs is not None else PolyCoeffs.from_preset(init, node.name)
        if lam == 1.0:
            node.activation = Activation(ActivationKind.TRAINABLE_POLY, coeffs=coeffs, init=init)
        else:
            node.activation = Activation(ActivationKind.WEIGHTED, coeffs=coeffs, lam=lam, init=init)
    return model
