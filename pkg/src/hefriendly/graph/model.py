"""Sequential model graphs built from typed layer nodes."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import yaml

from ..activations import Activation, ActivationKind
from ..autodiff import ops
from ..autodiff.tensor import Tensor, no_grad
from ..errors import ConfigError, ContractError, DimensionError

LAYER_KINDS = (
    "conv2d",
    "dense",
    "activation",
    "avg_pool",
    "max_pool",
    "batch_norm",
    "dropout",
    "flatten",
)

_ALIASES = {
    "conv": "conv2d",
    "conv2d": "conv2d",
    "dense": "dense",
    "fc": "dense",
    "linear": "dense",
    "activation": "activation",
    "act": "activation",
    "avg_pool": "avg_pool",
    "avgpool2d": "avg_pool",
    "avgpool": "avg_pool",
    "max_pool": "max_pool",
    "maxpool2d": "max_pool",
    "maxpool": "max_pool",
    "batch_norm": "batch_norm",
    "batchnorm2d": "batch_norm",
    "batchnorm1d": "batch_norm",
    "batchnorm": "batch_norm",
    "dropout": "dropout",
    "flatten": "flatten",
}

_BRANCHING = {"fire", "concat", "residual", "add", "branch", "inception"}

_ACT_ALIASES = {
    "relu": "relu",
    "square": "square",
    "approx_relu": "approx_relu",
    "trainable_poly": "trainable_poly",
    "trainable_polynomial": "trainable_poly",
    "poly": "trainable_poly",
    "weighted": "weighted",
}

_NAME_PREFIX = {
    "conv2d": "conv",
    "dense": "fc",
    "activation": "act",
    "avg_pool": "pool",
    "max_pool": "pool",
    "batch_norm": "bn",
    "dropout": "dropout",
    "flatten": "flatten",
}


def _pair(v) -> tuple:
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ConfigError(f"expected an int or a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass
class LayerNode:
    """A typed layer. ``params`` hold trainable tensors, ``buffers`` plain state."""

    name: str
    kind: str
    hyper: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    activation: Optional[Activation] = None

    def parameters(self) -> list:
        out = list(self.params.values())
        if self.activation is not None:
            out += self.activation.parameters()
        return out

    @property
    def op_kind(self) -> str:
        """Kind used by depth accounting; activations report their function."""
        if self.kind == "activation":
            return self.activation.kind.value
        return self.kind

    def describe(self) -> str:
        if self.kind == "activation":
            act = self.activation
            if act.kind is ActivationKind.WEIGHTED:
                return f"weighted(lambda={act.lam:g})"
            return act.kind.value
        keys = ", ".join(f"{k}={v}" for k, v in self.hyper.items() if k != "in_channels")
        return f"{self.kind}({keys})"


class ModelGraph:
    """An ordered, sequential graph of layer nodes.

    A graph may be *abstract* (shapes and hyperparameters only, no weights);
    abstract graphs support every static pass but cannot be evaluated.
    """

    def __init__(self, nodes: Iterable[LayerNode], input_shape, mode: str = "eval", name: str = "model"):
        self.nodes = list(nodes)
        self.input_shape = tuple(int(s) for s in input_shape)
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        self.name = name
        names = [n.name for n in self.nodes]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ConfigError(f"duplicate layer names: {sorted(dupes)}")
        self.shapes = self.infer_shapes()

    # -- structure ------------------------------------------------------------

    @property
    def is_abstract(self) -> bool:
        return any(n.kind in ("conv2d", "dense", "batch_norm") and not n.params for n in self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, name: str) -> LayerNode:
        for node in self.nodes:
            if node.name == name:
                return node
        raise KeyError(name)

    def index(self, name: str) -> int:
        for i, node in enumerate(self.nodes):
            if node.name == name:
                return i
        raise KeyError(name)

    def activation_nodes(self) -> list:
        return [n for n in self.nodes if n.kind == "activation"]

    def parameters(self) -> list:
        return [p for n in self.nodes for p in n.parameters()]

    def named_parameters(self) -> dict:
        out = {}
        for node in self.nodes:
            for key, t in node.params.items():
                out[f"{node.name}.{key}"] = t
            if node.activation is not None and node.activation.coeffs is not None:
                out[f"{node.name}.a"] = node.activation.coeffs.a
                out[f"{node.name}.b"] = node.activation.coeffs.b
        return out

    def copy(self, nodes=None) -> "ModelGraph":
        """Deep copy, optionally substituting a new node list."""
        nodes = copy.deepcopy(self.nodes if nodes is None else nodes)
        return ModelGraph(nodes, self.input_shape, self.mode, self.name)

    def with_mode(self, mode: str) -> "ModelGraph":
        g = self.copy()
        g.mode = mode
        return g

    def infer_shapes(self) -> list:
        """Output shape (excluding batch) after every node; raises on mismatch."""
        shape = self.input_shape
        shapes = []
        for node in self.nodes:
            shape = _infer(node, shape)
            shapes.append(shape)
        return shapes

    @property
    def output_shape(self) -> tuple:
        return self.shapes[-1] if self.shapes else self.input_shape

    def input_shape_of(self, index: int) -> tuple:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    # -- numerics -------------------------------------------------------------

    def initialize(self, rng: np.random.Generator) -> "ModelGraph":
        """Materialize weights in place: Kaiming-uniform kernels, zero biases."""
        shape = self.input_shape
        for node in self.nodes:
            h = node.hyper
            if node.kind == "conv2d":
                kh, kw = h["kernel"]
                fan_in = h["in_channels"] * kh * kw
                bound = math.sqrt(6.0 / fan_in)
                node.params = {
                    "weight": Tensor(rng.uniform(-bound, bound, (h["out_channels"], h["in_channels"], kh, kw)),
                                     requires_grad=True, name=f"{node.name}.weight"),
                    "bias": Tensor(np.zeros(h["out_channels"]), requires_grad=True, name=f"{node.name}.bias"),
                }
            elif node.kind == "dense":
                bound = math.sqrt(6.0 / h["in_features"])
                node.params = {
                    "weight": Tensor(rng.uniform(-bound, bound, (h["out_features"], h["in_features"])),
                                     requires_grad=True, name=f"{node.name}.weight"),
                    "bias": Tensor(np.zeros(h["out_features"]), requires_grad=True, name=f"{node.name}.bias"),
                }
            elif node.kind == "batch_norm":
                c = h["num_features"]
                node.params = {
                    "gamma": Tensor(np.ones(c), requires_grad=True, name=f"{node.name}.gamma"),
                    "beta": Tensor(np.zeros(c), requires_grad=True, name=f"{node.name}.beta"),
                }
                node.buffers = {"running_mean": np.zeros(c), "running_var": np.ones(c)}
            shape = _infer(node, shape)
        return self

    def forward(self, x, rng: Optional[np.random.Generator] = None) -> Tensor:
        if self.is_abstract:
            raise ContractError(f"graph {self.name!r} has no weights; initialize or load it first")
        x = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"expected input (batch, {self.input_shape}), got {x.shape}")
        training = self.mode == "train"
        for node in self.nodes:
            x = _apply(node, x, training, rng)
        return x

    __call__ = forward

    def predict_logits(self, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Batched forward pass without recording a tape."""
        out = []
        with no_grad():
            for i in range(0, len(X), batch_size):
                out.append(self.forward(Tensor(X[i:i + batch_size])).data)
        if not out:
            return np.zeros((0,) + tuple(self.output_shape))
        return np.concatenate(out, axis=0)

    # -- serialization --------------------------------------------------------

    def to_config(self) -> dict:
        layers = []
        for node in self.nodes:
            entry = {"name": node.name, "type": node.kind}
            for k, v in node.hyper.items():
                entry[k] = list(v) if isinstance(v, tuple) else v
            if node.activation is not None:
                entry["kind"] = node.activation.kind.value
                if node.activation.kind is ActivationKind.WEIGHTED:
                    entry["lambda"] = float(node.activation.lam)
            layers.append(entry)
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "mode": self.mode,
            "layers": layers,
        }

    @classmethod
    def from_config(cls, config: dict, rng: Optional[np.random.Generator] = None) -> "ModelGraph":
        """Build a graph from a parsed config mapping.

        Conv and dense entries may carry an ``activation`` key, which expands
        into a separate activation node placed right after the layer.
        """
        try:
            raw_layers = config["layers"]
            input_shape = tuple(config["input_shape"])
        except KeyError as exc:
            raise ConfigError(f"model config is missing key {exc}") from None
        counters: dict = {}
        used = set()
        nodes = []
        shape = input_shape

        def fresh(prefix):
            while True:
                counters[prefix] = counters.get(prefix, 0) + 1
                name = f"{prefix}{counters[prefix]}"
                if name not in used:
                    return name

        explicit = {entry.get("name") for entry in raw_layers if isinstance(entry, dict)}
        used |= {n for n in explicit if n}
        for entry in raw_layers:
            if not isinstance(entry, dict) or "type" not in entry:
                raise ConfigError(f"each layer needs a 'type' key, got {entry!r}")
            raw_type = str(entry["type"]).lower()
            if raw_type in _BRANCHING:
                raise ConfigError(
                    f"layer type {entry['type']!r} branches; only sequential graphs are supported"
                )
            kind = _ALIASES.get(raw_type)
            if kind is None:
                raise ConfigError(f"unknown layer type {entry['type']!r}")
            name = entry.get("name") or fresh(_NAME_PREFIX[kind])
            used.add(name)
            node = _make_node(kind, name, entry, shape)
            nodes.append(node)
            shape = _infer(node, shape)
            act = entry.get("activation")
            if act is not None and kind in ("conv2d", "dense"):
                act_name = entry.get("activation_name") or fresh("act")
                used.add(act_name)
                act_node = LayerNode(act_name, "activation", activation=_make_activation(
                    act, entry.get("lambda", 0.0), entry.get("init", config.get("coef_init", "relu_like"))
                ))
                nodes.append(act_node)
        g = cls(nodes, input_shape, config.get("mode", "eval"), config.get("name", "model"))
        if rng is not None:
            g.initialize(rng)
        return g

    @classmethod
    def from_yaml(cls, path, rng=None) -> "ModelGraph":
        path = Path(path)
        try:
            config = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read model config {path}: {exc}") from None
        return cls.from_config(config, rng)

    def summary(self) -> str:
        lines = [f"{self.name}  input={self.input_shape}  mode={self.mode}"]
        for node, shape in zip(self.nodes, self.shapes):
            lines.append(f"  {node.name:<12} {node.describe():<48} -> {shape}")
        return "\n".join(lines)


def _make_activation(kind, lam=0.0, init="relu_like") -> Activation:
    key = _ACT_ALIASES.get(str(kind).lower())
    if key is None:
        raise ConfigError(f"unknown activation {kind!r}")
    return Activation(ActivationKind(key), lam=float(lam) if key == "weighted" else 0.0, init=init)


def _make_node(kind: str, name: str, e: dict, shape: tuple) -> LayerNode:
    if kind == "conv2d":
        if len(shape) != 3:
            raise DimensionError(f"{name}: conv2d needs a (C, H, W) input, got {shape}")
        in_ch = int(e.get("in_channels", shape[0]))
        if in_ch != shape[0]:
            raise DimensionError(f"{name}: declared in_channels={in_ch} but input has {shape[0]}")
        padding = str(e.get("padding", "same"))
        if padding not in ("same", "valid"):
            raise ConfigError(f"{name}: padding must be 'same' or 'valid'")
        hyper = {
            "in_channels": in_ch,
            "out_channels": int(e["out_channels"]),
            "kernel": _pair(e.get("kernel", 3)),
            "stride": int(e.get("stride", 1)),
            "padding": padding,
        }
    elif kind == "dense":
        if len(shape) != 1:
            raise DimensionError(f"{name}: dense needs a flat input, got {shape}; add a flatten layer")
        in_f = int(e.get("in_features", shape[0]))
        if in_f != shape[0]:
            raise DimensionError(f"{name}: declared in_features={in_f} but input has {shape[0]}")
        hyper = {"in_features": in_f, "out_features": int(e["out_features"])}
    elif kind in ("avg_pool", "max_pool"):
        window = _pair(e.get("window", e.get("kernel", 2)))
        hyper = {"window": window, "stride": int(e.get("stride", window[0]))}
    elif kind == "batch_norm":
        c = int(e.get("num_features", shape[0]))
        if c != shape[0]:
            raise DimensionError(f"{name}: declared num_features={c} but input has {shape[0]} channels")
        hyper = {"num_features": c, "eps": float(e.get("eps", 1e-5)), "momentum": float(e.get("momentum", 0.1))}
    elif kind == "dropout":
        hyper = {"p": float(e.get("p", 0.5))}
    elif kind == "flatten":
        hyper = {}
    else:  # activation
        return LayerNode(name, kind, activation=_make_activation(
            e.get("kind", e.get("activation", "relu")), e.get("lambda", 0.0), e.get("init", "relu_like")
        ))
    return LayerNode(name, kind, hyper)


def _infer(node: LayerNode, shape: tuple) -> tuple:
    h = node.hyper
    if node.kind == "conv2d":
        if len(shape) != 3 or shape[0] != h["in_channels"]:
            raise DimensionError(f"{node.name}: expected ({h['in_channels']}, H, W), got {shape}")
        kh, kw = h["kernel"]
        s = h["stride"]
        _, H, W = shape
        if h["padding"] == "same":
            return (h["out_channels"], math.ceil(H / s), math.ceil(W / s))
        if kh > H or kw > W:
            raise DimensionError(f"{node.name}: kernel {kh}x{kw} larger than input {H}x{W}")
        return (h["out_channels"], (H - kh) // s + 1, (W - kw) // s + 1)
    if node.kind == "dense":
        if shape != (h["in_features"],):
            raise DimensionError(f"{node.name}: expected ({h['in_features']},), got {shape}")
        return (h["out_features"],)
    if node.kind in ("avg_pool", "max_pool"):
        if len(shape) != 3:
            raise DimensionError(f"{node.name}: pooling needs (C, H, W), got {shape}")
        kh, kw = h["window"]
        s = h["stride"]
        c, H, W = shape
        if kh > H or kw > W:
            raise DimensionError(f"{node.name}: window {kh}x{kw} exceeds input {H}x{W}")
        return (c, (H - kh) // s + 1, (W - kw) // s + 1)
    if node.kind == "batch_norm":
        if shape[0] != h["num_features"]:
            raise DimensionError(f"{node.name}: expected {h['num_features']} channels, got {shape}")
        return shape
    if node.kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


def _apply(node: LayerNode, x: Tensor, training: bool, rng) -> Tensor:
    kind, h, p = node.kind, node.hyper, node.params
    if kind == "conv2d":
        return ops.conv2d(x, p["weight"], p["bias"], h["stride"], h["padding"], node.buffers.get("pad_value"))
    if kind == "dense":
        return ops.dense(x, p["weight"], p["bias"])
    if kind == "activation":
        return node.activation(x)
    if kind == "avg_pool":
        return ops.avg_pool2d(x, h["window"], h["stride"])
    if kind == "max_pool":
        return ops.max_pool2d(x, h["window"], h["stride"])
    if kind == "batch_norm":
        return ops.batch_norm(
            x, p["gamma"], p["beta"], node.buffers["running_mean"], node.buffers["running_var"],
            h["eps"], training, h["momentum"],
        )
    if kind == "dropout":
        if not training:
            return x
        if rng is None:
            raise ContractError("training-mode dropout needs a random generator")
        return ops.dropout(x, h["p"], rng)
    if kind == "flatten":
        return ops.flatten(x)
    raise ContractError(f"cannot evaluate layer kind {kind!r}")
