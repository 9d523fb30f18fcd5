"""scikit-learn compatible classifier that trains HE-friendly CNNs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .activations import Activation, ActivationKind
from .autodiff import Adam, Tensor, backward, ops
from .autodiff.tensor import current_tape, no_grad
from .distill import KDParams, TeacherHandle, kd_loss
from .errors import ConfigError, ContractError, NumericError
from .graph import (
    ModelGraph,
    replace_activations,
    replace_avgpool_with_maxpool,
    replace_maxpool_with_avgpool,
)
from .schedule import TransitionSchedule, apply_transition, lambda_at_epoch, step_lambda

logger = logging.getLogger(__name__)

ARMS = (
    "baseline_relu_maxpool",
    "baseline_relu_avgpool",
    "square",
    "approx_relu",
    "tp",
    "tp_st",
    "tp_st_kd",
)

_FIXED_POLY = {"square": ActivationKind.SQUARE, "approx_relu": ActivationKind.APPROX_RELU}


class TrainingDiverged(NumericError):
    """Raised when a forward value, loss or gradient stops being finite."""

    def __init__(self, epoch: int, history: list, cause: Exception):
        super().__init__(f"training diverged at epoch {epoch}: {cause}")
        self.epoch = epoch
        self.history = history


@dataclass
class EpochRecord:
    epoch: int
    lam: float
    train_loss: float
    val_acc: float


def load_model_config(model) -> dict:
    """Resolve a shipped config name, a YAML path or an in-memory mapping."""
    if isinstance(model, dict):
        return model
    path = Path(str(model))
    if path.suffix in (".yaml", ".yml") and path.exists():
        return yaml.safe_load(path.read_text())
    try:
        text = resources.files("hefriendly.configs").joinpath(f"{model}.yaml").read_text()
    except (FileNotFoundError, OSError):
        raise ConfigError(f"no model config named {model!r} and no such file") from None
    return yaml.safe_load(text)


def _teacher_graph(teacher) -> Optional[ModelGraph]:
    if teacher is None:
        return None
    if isinstance(teacher, ModelGraph):
        return teacher
    if isinstance(teacher, HEFriendlyClassifier):
        check_is_fitted(teacher, "graph_")
        return teacher.graph_
    if isinstance(teacher, (str, Path)):
        from .checkpoint import load_checkpoint

        return load_checkpoint(teacher)[0]
    raise ConfigError(f"cannot use {type(teacher).__name__} as a teacher")


class HEFriendlyClassifier(ClassifierMixin, BaseEstimator):
    """CNN classifier whose ReLUs are replaced by trainable quadratics during training.

    Parameters
    ----------
    model : str, path or dict
        Name of a shipped model config (``"small_cnn"``), a YAML file, or a
        parsed mapping. Pools and activations in the config are overridden
        by ``arm``.
    arm : str
        Training recipe, one of :data:`ARMS`. The two baselines keep ReLU;
        ``square`` and ``approx_relu`` swap in a fixed polynomial at
        ``transition_start``; ``tp`` swaps in trainable quadratics at
        ``transition_start``; ``tp_st`` ramps them in over
        ``transition_duration`` epochs; ``tp_st_kd`` adds distillation from
        ``teacher``.
    teacher : HEFriendlyClassifier, ModelGraph or checkpoint path, optional
        Trained ReLU model. Required by ``tp_st_kd``.
    warm_start : {"teacher", "scratch"}
        Where non-baseline arms take their initial weights from.
    augment : callable, optional
        ``augment(batch, rng) -> batch`` applied to every training batch.
    """

    def __init__(
        self,
        model="small_cnn",
        arm="tp_st",
        epochs=30,
        batch_size=32,
        lr=3e-4,
        transition_start=3,
        transition_duration=10,
        kd_tau=10.0,
        kd_alpha=0.1,
        kd_delay_until_poly=False,
        coef_init="relu_like",
        teacher=None,
        warm_start="teacher",
        augment: Optional[Callable] = None,
        random_state=None,
    ):
        self.model = model
        self.arm = arm
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.transition_start = transition_start
        self.transition_duration = transition_duration
        self.kd_tau = kd_tau
        self.kd_alpha = kd_alpha
        self.kd_delay_until_poly = kd_delay_until_poly
        self.coef_init = coef_init
        self.teacher = teacher
        self.warm_start = warm_start
        self.augment = augment
        self.random_state = random_state

    # -- helpers ----------------------------------------------------------------

    def _check_params(self):
        if self.arm not in ARMS:
            raise ConfigError(f"unknown arm {self.arm!r}; choose from {ARMS}")
        if self.arm == "tp_st_kd" and self.teacher is None:
            raise ConfigError("arm 'tp_st_kd' needs a teacher")
        if self.warm_start not in ("teacher", "scratch"):
            raise ConfigError(f"warm_start must be 'teacher' or 'scratch', got {self.warm_start!r}")
        if int(self.epochs) < 1 or int(self.batch_size) < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        return TransitionSchedule(self.transition_start, self.transition_duration)

    def _lambda(self, schedule, epoch) -> float:
        if self.arm.startswith("baseline"):
            return 0.0
        if self.arm in ("tp_st", "tp_st_kd"):
            return lambda_at_epoch(schedule, epoch)
        return step_lambda(schedule, epoch)

    def _build_graph(self, rng, teacher_graph) -> ModelGraph:
        if teacher_graph is not None and self.warm_start == "teacher" and not self.arm.startswith("baseline"):
            graph = teacher_graph.with_mode("train")
            for p in graph.parameters():
                p.requires_grad = True
            graph = replace_activations(graph, "relu")
        else:
            graph = ModelGraph.from_config(load_model_config(self.model), rng)
            graph = replace_activations(graph, "relu")
        if self.arm == "baseline_relu_maxpool":
            graph = replace_avgpool_with_maxpool(graph)[0]
        else:
            graph = replace_maxpool_with_avgpool(graph)[0]
        graph.mode = "train"
        if self.arm in ("tp", "tp_st", "tp_st_kd"):
            apply_transition(graph, 0.0, init=self.coef_init)
        return graph

    def _set_activations(self, graph, lam):
        if self.arm.startswith("baseline"):
            return
        if self.arm in _FIXED_POLY:
            kind = _FIXED_POLY[self.arm] if lam == 1.0 else ActivationKind.RELU
            for node in graph.activation_nodes():
                if node.activation.kind is not kind:
                    node.activation = Activation(kind)
            return
        apply_transition(graph, lam, init=self.coef_init)

    def _reshape(self, X):
        shape = self.input_shape_
        if X.ndim == 2 and X.shape[1] == int(np.prod(shape)):
            X = X.reshape((X.shape[0],) + shape)
        if tuple(X.shape[1:]) != shape:
            raise ContractError(f"expected samples of shape {shape}, got {X.shape[1:]}")
        return X

    def _run_epoch(self, graph, opt, X, y_idx, order, lam, kd, teacher, drop_rng, aug_rng):
        total, seen, bs = 0.0, 0, int(self.batch_size)
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            xb = X[idx]
            if self.augment is not None:
                xb = self.augment(xb, aug_rng)
            logits = graph.forward(Tensor(xb), rng=drop_rng)
            if kd is not None and not (self.kd_delay_until_poly and lam < 1.0):
                loss = kd_loss(logits, teacher.logits(xb), y_idx[idx], kd)
            else:
                loss = ops.cross_entropy(logits, y_idx[idx])
            backward(loss)
            opt.step()
            opt.zero_grad()
            total += loss.item() * len(idx)
            seen += len(idx)
        return total, seen

    # -- sklearn API ----------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None):
        schedule = self._check_params()
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        teacher_graph = _teacher_graph(self.teacher)
        init_ss, shuffle_ss, drop_ss, aug_ss = np.random.SeedSequence(self.random_state).spawn(4)
        graph = self._build_graph(np.random.default_rng(init_ss), teacher_graph)
        self.input_shape_ = graph.input_shape
        X = self._reshape(X)
        if graph.output_shape != (len(self.classes_),):
            raise ConfigError(
                f"model emits {graph.output_shape} logits but y has {len(self.classes_)} classes"
            )
        if X_val is not None:
            X_val = self._reshape(check_array(X_val, allow_nd=True, dtype=np.float64))
            y_val = np.searchsorted(self.classes_, np.asarray(y_val))

        kd = teacher = None
        if self.arm == "tp_st_kd":
            kd = KDParams(self.kd_tau, self.kd_alpha)
            teacher = TeacherHandle(teacher_graph)
        shuffle_rng = np.random.default_rng(shuffle_ss)
        drop_rng = np.random.default_rng(drop_ss)
        aug_rng = np.random.default_rng(aug_ss)
        # Coefficients are created by the first transition, so the parameter
        # list is complete before the optimizer sees it.
        opt = Adam(graph.parameters(), lr=self.lr)
        self.history_ = []
        n = len(X)
        for epoch in range(int(self.epochs)):
            lam = self._lambda(schedule, epoch)
            self._set_activations(graph, lam)
            graph.mode = "train"
            order = shuffle_rng.permutation(n)
            try:
                # Overflow surfaces as NumericError from the ops; numpy's own warning is noise here.
                with np.errstate(over="ignore", invalid="ignore"):
                    total, seen = self._run_epoch(graph, opt, X, y_idx, order, lam, kd, teacher, drop_rng, aug_rng)
                graph.mode = "eval"
                val_acc = float("nan")
                if X_val is not None:
                    val_acc = float(np.mean(graph.predict_logits(X_val).argmax(axis=1) == y_val))
            except NumericError as exc:
                tape = current_tape()
                if tape is not None:
                    tape.clear()
                graph.mode = "eval"
                self.graph_ = graph
                self.diverged_epoch_ = epoch
                raise TrainingDiverged(epoch, self.history_, exc) from exc
            record = EpochRecord(epoch, lam, total / max(seen, 1), val_acc)
            self.history_.append(record)
            logger.info("epoch %d lambda=%.2f loss=%.4f val_acc=%.4f", epoch, lam, record.train_loss, val_acc)
        graph.mode = "eval"
        self.graph_ = graph
        return self

    def decision_function(self, X):
        check_is_fitted(self, "graph_")
        X = self._reshape(check_array(X, allow_nd=True, dtype=np.float64))
        self.graph_.mode = "eval"
        return self.graph_.predict_logits(X)

    def predict_proba(self, X):
        z = self.decision_function(X)
        with no_grad():
            return ops.softmax(Tensor(z)).data

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    @property
    def coefficients_(self) -> dict:
        """Current (a, b) of every polynomial activation layer."""
        check_is_fitted(self, "graph_")
        return {
            n.name: n.activation.coeffs.values
            for n in self.graph_.activation_nodes()
            if n.activation.coeffs is not None
        }
