"""Response-based knowledge distillation with temperature-softened targets."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, no_grad
from .errors import ContractError, DataError, DimensionError


@dataclass(frozen=True)
class KDParams:
    tau: float = 10.0
    alpha: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")


def soft_targets(logits, tau: float) -> Tensor:
    """Row-wise softmax of ``logits / tau``."""
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    return ops.softmax(ops.scale(logits, 1.0 / tau))


def _probs(logits: np.ndarray, tau: float) -> np.ndarray:
    z = logits / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kd_loss(student_logits: Tensor, teacher_logits, y_true, p: KDParams) -> Tensor:
    """alpha * tau^2 * CE(teacher soft targets, student soft targets) + (1 - alpha) * CE(labels).

    Both terms are averaged over the batch. Teacher logits enter as constants,
    so no gradient reaches them.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if t.shape != student_logits.shape:
        raise DimensionError(f"teacher logits {t.shape} do not match student logits {student_logits.shape}")
    y = np.asarray(y_true, dtype=np.int64)
    if y.shape != (student_logits.shape[0],):
        raise DimensionError(f"expected {student_logits.shape[0]} labels, got shape {y.shape}")
    k = student_logits.shape[-1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise DataError(f"class index out of range [0, {k})")
    if p.alpha == 0.0:
        return ops.cross_entropy(student_logits, y)
    q_teacher = Tensor(_probs(t, p.tau))
    log_q_student = ops.log_softmax(ops.scale(student_logits, 1.0 / p.tau))
    n = student_logits.shape[0]
    soft = ops.scale(ops.sum(ops.mul(q_teacher, log_q_student)), -p.alpha * p.tau ** 2 / n)
    if p.alpha == 1.0:
        return soft
    return ops.add(soft, ops.scale(ops.cross_entropy(student_logits, y), 1.0 - p.alpha))


class TeacherHandle:
    """A frozen, eval-mode copy of a trained graph."""

    def __init__(self, graph):
        g = copy.deepcopy(graph) if not hasattr(graph, "with_mode") else graph.with_mode("eval")
        for t in g.parameters():
            t.requires_grad = False
            t.grad = None
        self.graph = g

    def logits(self, x) -> np.ndarray:
        self.graph.mode = "eval"
        with no_grad():
            return self.graph.forward(x).data

    def parameters(self) -> list:
        return self.graph.parameters()
