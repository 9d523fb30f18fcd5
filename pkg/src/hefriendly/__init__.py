"""Train HE-friendly CNNs with trainable quadratic activations and audit them for HE readiness."""

from .activations import Activation, ActivationKind, PolyCoeffs, approx_relu, relu, square, trainable_poly, weighted_act
from .distill import KDParams, TeacherHandle, kd_loss, soft_targets
from .schedule import TransitionSchedule, apply_transition, lambda_at_epoch

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "ActivationKind",
    "KDParams",
    "PolyCoeffs",
    "TeacherHandle",
    "TransitionSchedule",
    "apply_transition",
    "approx_relu",
    "kd_loss",
    "lambda_at_epoch",
    "relu",
    "soft_targets",
    "square",
    "trainable_poly",
    "weighted_act",
]
