"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, using_tape


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self) -> list:
        return [name for name, err in self.errors.items() if not err < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), or the absolute gap when both vanish."""
    diff = float(np.linalg.norm(analytic - numeric))
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return diff / denom if denom > 1e-12 else diff


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare autodiff gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the scalar loss from the current ``params`` data
    on each call and be deterministic.
    """
    params = list(params)
    tape = Tape()
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with using_tape(tape):
        loss = loss_fn()
        backward(loss, tape)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    report = GradCheckReport(tolerance=tolerance)
    with using_tape(Tape()) as scratch:
        for k, p in enumerate(params):
            numeric = np.zeros(p.shape)
            flat = p.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2.0 * step)
                scratch.clear()
            report.errors[p.name or f"param{k}"] = relative_error(analytic[k], numeric)
    return report
