"""Static HE-readiness analysis: multiplicative depth and linting."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from ..activations import ActivationKind
from ..errors import ConfigError
from .model import ModelGraph

DEFAULT_COSTS = {
    "conv2d": 1,
    "dense": 1,
    "trainable_poly": 1,
    "square": 1,
    "approx_relu": 1,
    "avg_pool": 1,
    "batch_norm": 1,
    "flatten": 0,
    "dropout": 0,
}

# Comparison-based ops: they have no multiplicative cost because they cannot
# be evaluated with additions and multiplications at all.
UNCOSTABLE = frozenset({"relu", "max_pool"})

# Ignored by the layer count alongside dropout: pure reshapes.
_UNCOUNTED = frozenset({"dropout", "flatten"})


@dataclass
class DepthConvention:
    costs: dict = field(default_factory=lambda: dict(DEFAULT_COSTS))

    def __post_init__(self):
        bad = UNCOSTABLE & set(self.costs)
        if bad:
            raise ConfigError(f"{sorted(bad)} cannot be assigned a depth cost")
        for kind, cost in self.costs.items():
            if not isinstance(cost, int) or cost < 0:
                raise ConfigError(f"depth cost for {kind!r} must be a non-negative integer, got {cost!r}")

    @classmethod
    def from_file(cls, path) -> "DepthConvention":
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read depth convention {path}: {exc}") from None
        raw = raw.get("costs", raw)
        costs = dict(DEFAULT_COSTS)
        costs.update(raw)
        return cls(costs)

    def cost(self, kind: str) -> Optional[int]:
        return self.costs.get(kind)


@dataclass
class Violation:
    node: str
    reason: str

    def __str__(self):
        return f"{self.node}: {self.reason}"


@dataclass
class DepthEntry:
    name: str
    kind: str
    cost: Optional[int]


@dataclass
class DepthReport:
    entries: list
    total: int
    violations: list
    layer_count: int

    @property
    def he_friendly(self) -> bool:
        return not self.violations

    def render(self) -> str:
        width = max([len(e.name) for e in self.entries] + [4])
        lines = [f"{'node':<{width}}  {'kind':<16} cost  cumulative"]
        running = 0
        for e in self.entries:
            if e.cost is None:
                lines.append(f"{e.name:<{width}}  {e.kind:<16} {'-':>4}  {running:>10}  !")
            else:
                running += e.cost
                lines.append(f"{e.name:<{width}}  {e.kind:<16} {e.cost:>4}  {running:>10}")
        lines.append("")
        lines.append(f"multiplicative depth: {self.total}")
        lines.append(f"layer count: {self.layer_count}")
        if self.violations:
            lines.append(f"violations ({len(self.violations)}):")
            lines.extend(f"  {v}" for v in self.violations)
        else:
            lines.append("violations: none")
        return "\n".join(lines)


def _depth_kind(node) -> str:
    if node.kind == "activation":
        act = node.activation
        if act.kind is ActivationKind.WEIGHTED:
            return "trainable_poly" if act.lam == 1.0 else "weighted"
        return act.kind.value
    return node.kind


def layer_count(g: ModelGraph) -> int:
    """Layers including activations, excluding dropout and flatten."""
    return sum(1 for n in g.nodes if n.kind not in _UNCOUNTED)


def multiplicative_depth(g: ModelGraph, convention: Optional[DepthConvention] = None) -> DepthReport:
    """Sum per-node multiplication costs along the sequential chain.

    Kinds without a cost under ``convention`` are reported as violations
    rather than raising.
    """
    convention = convention or DepthConvention()
    entries, violations, total = [], [], 0
    for node in g.nodes:
        kind = _depth_kind(node)
        cost = convention.cost(kind)
        entries.append(DepthEntry(node.name, kind, cost))
        if cost is None:
            violations.append(Violation(node.name, f"{kind} has no multiplicative-depth cost"))
        else:
            total += cost
    return DepthReport(entries, total, violations, layer_count(g))


def he_lint(g: ModelGraph) -> list:
    """List every node that keeps ``g`` from being evaluated under HE."""
    out = []
    for node in g.nodes:
        kind = node.kind
        if kind == "activation":
            act = node.activation
            if act.kind is ActivationKind.RELU:
                out.append(Violation(node.name, "ReLU needs a comparison"))
            elif act.kind is ActivationKind.WEIGHTED and act.lam < 1.0:
                out.append(Violation(node.name, f"weighted activation at lambda={act.lam:g} keeps a ReLU branch"))
        elif kind == "max_pool":
            out.append(Violation(node.name, "max-pooling needs comparisons"))
        elif kind == "batch_norm" and g.mode == "train":
            out.append(Violation(node.name, "train-mode batch norm divides by batch statistics"))
        elif kind == "dropout":
            out.append(Violation(node.name, "dropout is training-only and must be removed"))
        elif kind not in ("conv2d", "dense", "avg_pool", "batch_norm", "flatten"):
            out.append(Violation(node.name, f"{kind} is not a polynomial operation"))
    return out
