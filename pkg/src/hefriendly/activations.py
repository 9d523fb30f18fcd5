"""Activation functions: ReLU and its HE-friendly polynomial replacements."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, no_grad
from .errors import ConfigError, ContractError

APPROX_RELU_COEFFS = (0.00047, 0.5)

# (a, b) starting points for the trainable polynomial. The scaled presets
# multiply the template 0.0*x^2 + 1.1*x by (s1, s2).
INIT_PRESETS = {
    "relu_like": (0.0, 1.0),
    "scaled_0.1_0.1": (0.1 * 0.0, 0.1 * 1.1),
    "scaled_0.01_0.1": (0.01 * 0.0, 0.1 * 1.1),
}


class ActivationKind(str, Enum):
    RELU = "relu"
    SQUARE = "square"
    APPROX_RELU = "approx_relu"
    TRAINABLE_POLY = "trainable_poly"
    WEIGHTED = "weighted"


@dataclass
class PolyCoeffs:
    """The trainable pair (a, b) of one activation layer, shared by all channels."""

    a: Tensor
    b: Tensor

    @classmethod
    def create(cls, a: float = 0.0, b: float = 1.0, name: str = "") -> "PolyCoeffs":
        prefix = f"{name}." if name else ""
        return cls(
            Tensor([float(a)], requires_grad=True, name=f"{prefix}a"),
            Tensor([float(b)], requires_grad=True, name=f"{prefix}b"),
        )

    @classmethod
    def from_preset(cls, preset: str, name: str = "") -> "PolyCoeffs":
        try:
            a, b = INIT_PRESETS[preset]
        except KeyError:
            raise ConfigError(
                f"unknown coefficient preset {preset!r}; choose from {sorted(INIT_PRESETS)}"
            ) from None
        return cls.create(a, b, name)

    @property
    def values(self) -> tuple:
        return float(self.a.data[0]), float(self.b.data[0])

    def parameters(self) -> list:
        return [self.a, self.b]


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def relu(x) -> Tensor:
    return ops.relu(_t(x))


def square(x) -> Tensor:
    return ops.square(_t(x))


def approx_relu(x) -> Tensor:
    """0.00047*x^2 + 0.5*x; the coefficients are constants, not parameters."""
    return ops.quadratic(_t(x), *APPROX_RELU_COEFFS)


def trainable_poly(x, c: PolyCoeffs) -> Tensor:
    return ops.poly_act(_t(x), c.a, c.b)


def weighted_act(x, lam: float, c: PolyCoeffs) -> Tensor:
    return ops.weighted_act(_t(x), lam, c.a, c.b)


@dataclass
class Activation:
    """One activation layer's state.

    ``lam`` is the blend weight of a ``weighted`` activation. It is plain
    state owned by the transition scheduler and never handed to an optimizer.
    """

    kind: ActivationKind
    coeffs: Optional[PolyCoeffs] = None
    lam: float = 0.0
    init: str = field(default="relu_like", compare=False)

    def __post_init__(self):
        self.kind = ActivationKind(self.kind)
        if self.kind in (ActivationKind.TRAINABLE_POLY, ActivationKind.WEIGHTED) and self.coeffs is None:
            self.coeffs = PolyCoeffs.from_preset(self.init)
        if self.kind is ActivationKind.WEIGHTED and not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"blend weight must lie in [0, 1], got {self.lam}")

    def __call__(self, x) -> Tensor:
        kind = self.kind
        if kind is ActivationKind.RELU:
            return relu(x)
        if kind is ActivationKind.SQUARE:
            return square(x)
        if kind is ActivationKind.APPROX_RELU:
            return approx_relu(x)
        if kind is ActivationKind.TRAINABLE_POLY:
            return trainable_poly(x, self.coeffs)
        return weighted_act(x, self.lam, self.coeffs)

    def parameters(self) -> list:
        return self.coeffs.parameters() if self.coeffs is not None else []

    @property
    def is_polynomial(self) -> bool:
        if self.kind is ActivationKind.WEIGHTED:
            return self.lam == 1.0
        return self.kind is not ActivationKind.RELU

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy evaluation, used for plotting and table output."""
        with no_grad():
            return self(Tensor(x)).data
