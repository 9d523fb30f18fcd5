"""Classification metrics and seed aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ContractError


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts ``C[i, j]`` of samples with true class i predicted as j."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    """One-vs-rest F1 per class; 0 where a class is neither predicted nor present."""
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    actual = cm.sum(axis=1).astype(np.float64)
    # 2PR / (P + R) == 2 TP / (predicted + actual)
    denom = predicted + actual
    return np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def classification_scores(y_true, y_pred, num_classes: Optional[int] = None):
    """Return ``(accuracy, macro_f1, per_class_f1)``."""
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise ContractError("cannot score an empty test set")
    if num_classes is None:
        num_classes = int(max(np.max(y_true), np.max(y_pred))) + 1
    cm = confusion_matrix(y_true, y_pred, num_classes)
    f1 = per_class_f1(cm)
    return float(np.trace(cm) / cm.sum()), float(f1.mean()), f1.tolist()


def evaluate(model, X, y, num_classes: Optional[int] = None):
    """Score a fitted classifier or an eval-mode :class:`ModelGraph` on a test set."""
    if len(y) == 0:
        raise ContractError("cannot score an empty test set")
    if hasattr(model, "predict_logits"):
        if model.mode != "eval":
            raise ContractError("evaluate needs an eval-mode graph")
        pred = model.predict_logits(np.asarray(X, dtype=np.float64)).argmax(axis=1)
        num_classes = num_classes or model.output_shape[0]
    else:
        pred = np.searchsorted(model.classes_, model.predict(X))
        y = np.searchsorted(model.classes_, y)
        num_classes = num_classes or len(model.classes_)
    return classification_scores(y, pred, num_classes)


@dataclass
class MetricsRecord:
    arm: str
    seed: Optional[int]
    epochs: list = field(default_factory=list)
    test_acc: float = float("nan")
    macro_f1: float = float("nan")
    per_class_f1: list = field(default_factory=list)
    failed: bool = False
    failed_epoch: Optional[int] = None
    checkpoint: Optional[str] = None


@dataclass
class AggregateRecord:
    arm: str
    n_completed: int
    failure_count: int
    acc_mean: float
    acc_std: float
    f1_mean: float
    f1_std: float

    @property
    def failed(self) -> bool:
        return self.n_completed == 0


def _mean_std(values) -> tuple:
    if not values:
        return float("nan"), float("nan")
    m = math.fsum(values) / len(values)
    if len(values) < 2:
        return m, 0.0
    var = math.fsum((v - m) ** 2 for v in values) / (len(values) - 1)
    return m, math.sqrt(var)


def seed_sweep_aggregate(records: list) -> AggregateRecord:
    """Mean and sample standard deviation over completed runs of one arm."""
    if not records:
        raise ContractError("nothing to aggregate")
    arms = {r.arm for r in records}
    if len(arms) != 1:
        raise ContractError(f"records mix arms: {sorted(arms)}")
    done = [r for r in records if not r.failed]
    acc_m, acc_s = _mean_std([r.test_acc for r in done])
    f1_m, f1_s = _mean_std([r.macro_f1 for r in done])
    return AggregateRecord(records[0].arm, len(done), len(records) - len(done), acc_m, acc_s, f1_m, f1_s)
