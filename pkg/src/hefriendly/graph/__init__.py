"""Model graphs and the compiler-style passes that prepare them for HE."""

from .depth import (
    DEFAULT_COSTS,
    DepthConvention,
    DepthReport,
    Violation,
    he_lint,
    layer_count,
    multiplicative_depth,
)
from .model import LayerNode, ModelGraph
from .passes import (
    finalize_he_friendly,
    fold_batch_norm,
    relu_maxpool_baseline,
    replace_activations,
    replace_avgpool_with_maxpool,
    replace_maxpool_with_avgpool,
)

__all__ = [
    "DEFAULT_COSTS",
    "DepthConvention",
    "DepthReport",
    "LayerNode",
    "ModelGraph",
    "Violation",
    "finalize_he_friendly",
    "fold_batch_norm",
    "he_lint",
    "layer_count",
    "multiplicative_depth",
    "relu_maxpool_baseline",
    "replace_activations",
    "replace_avgpool_with_maxpool",
    "replace_maxpool_with_avgpool",
]
