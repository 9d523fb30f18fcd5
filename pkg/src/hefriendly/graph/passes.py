"""Rewrites that turn a trained graph into an HE-evaluable one.

Every pass copies its input; the argument graph is never modified.
"""

from __future__ import annotations

import numpy as np

from ..activations import Activation, ActivationKind
from ..autodiff.ops import same_padding
from ..autodiff.tensor import Tensor
from ..errors import ContractError, FinalizationError, FoldError
from .depth import he_lint
from .model import LayerNode, ModelGraph

# Layers a batch norm may be folded through on its way to the next linear layer.
_TRANSPARENT = ("dropout", "flatten")


def _bn_affine(node: LayerNode):
    gamma = node.params["gamma"].data
    beta = node.params["beta"].data
    mean = node.buffers["running_mean"]
    var = node.buffers["running_var"]
    if np.any(var < 0):
        raise FoldError(f"{node.name}: negative running variance")
    inv = 1.0 / np.sqrt(var + node.hyper["eps"])
    scale = gamma * inv
    shift = beta - gamma * mean * inv
    return scale, shift


def _conv_has_padding(graph: ModelGraph, index: int) -> bool:
    node = graph.nodes[index]
    if node.hyper["padding"] != "same":
        return False
    _, h, w = graph.input_shape_of(index)
    kh, kw = node.hyper["kernel"]
    s = node.hyper["stride"]
    return any(same_padding(h, kh, s)) or any(same_padding(w, kw, s))


def _fold_into_conv(graph, bn, target_index, scale, shift):
    target = graph.nodes[target_index]
    W = target.params["weight"].data
    b = target.params["bias"].data
    new_W = W * scale.reshape(1, -1, 1, 1)
    new_b = b + np.einsum("ocij,c->o", W, shift)
    if _conv_has_padding(graph, target_index):
        # The border was zero *after* normalization; pad with the raw value
        # that normalizes to that same constant instead.
        current = target.buffers.get("pad_value", np.zeros(scale.shape))
        pad = np.empty_like(scale)
        for c in range(scale.size):
            if scale[c] != 0.0:
                pad[c] = (current[c] - shift[c]) / scale[c]
            elif current[c] == shift[c]:
                pad[c] = 0.0
            else:
                raise FoldError(
                    f"{bn.name}: channel {c} has zero scale and a nonzero shift; "
                    f"cannot fold into padded convolution {target.name}"
                )
        target.buffers["pad_value"] = pad
    target.params["weight"] = Tensor(new_W, requires_grad=True, name=f"{target.name}.weight")
    target.params["bias"] = Tensor(new_b, requires_grad=True, name=f"{target.name}.bias")


def _fold_into_dense(graph, bn_index, target_index, scale, shift):
    target = graph.nodes[target_index]
    bn_shape = graph.input_shape_of(bn_index)
    spatial = int(np.prod(bn_shape[1:])) if len(bn_shape) > 1 else 1
    # Flatten is row-major over (C, H, W): channel c owns a contiguous run.
    s = np.repeat(scale, spatial)
    t = np.repeat(shift, spatial)
    W = target.params["weight"].data
    if W.shape[1] != s.size:
        raise FoldError(f"{target.name}: expects {W.shape[1]} inputs, batch norm feeds {s.size}")
    target.params["weight"] = Tensor(W * s.reshape(1, -1), requires_grad=True, name=f"{target.name}.weight")
    target.params["bias"] = Tensor(target.params["bias"].data + W @ t, requires_grad=True,
                                   name=f"{target.name}.bias")


def fold_batch_norm(g: ModelGraph) -> ModelGraph:
    """Absorb every eval-mode batch norm into the following conv or dense layer.

    The batch norm may be separated from its target only by dropout or
    flatten nodes. The result computes the same function as ``g``.
    """
    if g.mode != "eval":
        raise ContractError("fold_batch_norm requires an eval-mode graph")
    out = g.copy()
    abstract = out.is_abstract
    removed = []
    for i, node in enumerate(out.nodes):
        if node.kind != "batch_norm":
            continue
        j = i + 1
        while j < len(out.nodes) and out.nodes[j].kind in _TRANSPARENT:
            j += 1
        if j == len(out.nodes):
            raise FoldError(f"{node.name}: no following conv or dense layer to fold into")
        target = out.nodes[j]
        if target.kind not in ("conv2d", "dense"):
            raise FoldError(
                f"{node.name}: followed by {target.name} ({target.describe()}), "
                "which is not a conv or dense layer"
            )
        if not abstract:
            scale, shift = _bn_affine(node)
            if target.kind == "conv2d":
                _fold_into_conv(out, node, j, scale, shift)
            else:
                _fold_into_dense(out, i, j, scale, shift)
        removed.append(i)
    nodes = [n for k, n in enumerate(out.nodes) if k not in set(removed)]
    return ModelGraph(nodes, out.input_shape, out.mode, out.name)


def replace_maxpool_with_avgpool(g: ModelGraph):
    """Swap every max-pool for an average-pool with the same window and stride.

    Returns ``(graph, replaced)`` where ``replaced`` lists the node names.
    """
    out = g.copy()
    replaced = []
    for node in out.nodes:
        if node.kind == "max_pool":
            node.kind = "avg_pool"
            replaced.append(node.name)
    return ModelGraph(out.nodes, out.input_shape, out.mode, out.name), replaced


def replace_avgpool_with_maxpool(g: ModelGraph):
    """Inverse of :func:`replace_maxpool_with_avgpool`, for building baselines."""
    out = g.copy()
    replaced = []
    for node in out.nodes:
        if node.kind == "avg_pool":
            node.kind = "max_pool"
            replaced.append(node.name)
    return ModelGraph(out.nodes, out.input_shape, out.mode, out.name), replaced


def replace_activations(g: ModelGraph, kind, init: str = "relu_like") -> ModelGraph:
    """Give every activation node a fresh activation of ``kind``."""
    out = g.copy()
    for node in out.activation_nodes():
        node.activation = Activation(ActivationKind(kind), init=init)
    return out


def relu_maxpool_baseline(g: ModelGraph) -> ModelGraph:
    """The non-HE reference form of ``g``: ReLU activations and max-pooling."""
    return replace_avgpool_with_maxpool(replace_activations(g, "relu"))[0]


def finalize_he_friendly(g: ModelGraph) -> ModelGraph:
    """Produce the deployable inference graph of a fully transitioned model.

    Weighted activations at blend weight 1 become plain trainable
    polynomials (keeping their coefficients), dropout is dropped, the graph
    switches to eval mode, and batch norms are folded away.
    """
    for node in g.nodes:
        if node.kind == "activation":
            act = node.activation
            if act.kind is ActivationKind.WEIGHTED and act.lam < 1.0:
                raise FinalizationError(
                    f"{node.name}: weighted activation still at lambda={act.lam:g}; "
                    "finish the transition first"
                )
            if act.kind is ActivationKind.RELU:
                raise FinalizationError(f"{node.name}: ReLU activation cannot be evaluated under HE")
        if node.kind == "max_pool":
            raise FinalizationError(
                f"{node.name}: max-pooling cannot be evaluated under HE; replace it with average-pooling"
            )
    out = g.copy()
    nodes = []
    for node in out.nodes:
        if node.kind == "dropout":
            continue
        if node.kind == "activation" and node.activation.kind is ActivationKind.WEIGHTED:
            node.activation = Activation(ActivationKind.TRAINABLE_POLY, coeffs=node.activation.coeffs)
        nodes.append(node)
    out = fold_batch_norm(ModelGraph(nodes, out.input_shape, "eval", out.name))
    problems = he_lint(out)
    if problems:
        raise FinalizationError("finalized graph is not HE-friendly: " + "; ".join(map(str, problems)))
    return out
