"""Information-loss metrics and cluster enlargement.

Three categorical metrics price a generalization node ``u`` inside a
hierarchy with ``M`` known leaves:

- generalization loss (glm):   (leaves(u) - 1) / (M - 1)
- certainty penalty (ncp):     0 if leaves(u) = 1, else leaves(u) / |A_Cat|
- request-weighted loss (prl): 0 if leaves(u) = 1, else rnc(u) / rnc(root)

Numeric attributes always use the domain-ratio loss (high - low) / (U - L).
All metrics return values in [0, 1] and grow monotonically along any
leaf-to-root path.  Everything here is a pure function over supplied state;
request counts are never mutated during evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

from anonstream.core import (
    AnonStreamError,
    AttributeValue,
    Categorical,
    CategoricalWithPath,
    DataTuple,
    GeneralizationRule,
    InvariantError,
    Numeric,
    RuleKind,
    LossMetric,
)
from anonstream.hierarchy import DGH, DGHNode


class DomainViolation(AnonStreamError):
    """A value or interval falls outside its attribute's numeric domain."""


@dataclass
class NumericDomain:
    """Closed numeric bounds an interval loss is normalized against.

    ``observed=True`` marks a running [min, max] tracked from the stream;
    ``observed=False`` marks fixed bounds taken from a rule.
    """

    lower: float
    upper: float
    observed: bool = True

    def __post_init__(self) -> None:
        self.lower = float(self.lower)
        self.upper = float(self.upper)
        if self.lower > self.upper:
            raise InvariantError(f"domain lower {self.lower} exceeds upper {self.upper}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def expand(self, value: float) -> None:
        """Stretch an observed domain to include ``value``."""
        if not self.observed:
            raise InvariantError("fixed domains do not expand")
        if value < self.lower:
            self.lower = value
        if value > self.upper:
            self.upper = value

    def contains(self, low: float, high: float) -> bool:
        return self.lower <= low and high <= self.upper


@dataclass
class CategoricalContext:
    """Evaluation context for one categorical attribute."""

    dgh: DGH
    universe_size: int | None = None


AttributeContext = Union[NumericDomain, CategoricalContext]


# ---------------------------------------------------------------------------
# Metric primitives


def glm_numeric(low: float, high: float, domain: NumericDomain) -> float:
    """Domain-ratio loss of the closed interval [low, high]."""
    if low > high:
        raise InvariantError(f"interval low {low} exceeds high {high}")
    if not domain.contains(low, high):
        raise DomainViolation(
            f"interval [{low}, {high}] exceeds domain [{domain.lower}, {domain.upper}]"
        )
    if domain.width == 0.0:
        return 0.0
    return (high - low) / domain.width


def glm_categorical(node: DGHNode, dgh: DGH) -> float:
    """Share of the leaf universe a generalization node blankets."""
    total = dgh.leaf_count_total
    if total <= 1:
        return 0.0
    return (node.leaf_count - 1) / (total - 1)


def ncp_categorical(node: DGHNode, a_cat_size: int) -> float:
    """Certainty penalty: subtree cardinality against the value universe."""
    if a_cat_size < 1:
        raise InvariantError(f"a_cat_size must be positive, got {a_cat_size}")
    card = node.leaf_count
    if card == 1:
        return 0.0
    return min(1.0, card / a_cat_size)


def prl(node: DGHNode, dgh: DGH) -> float:
    """Request-weighted loss: observation mass under the node.

    A node covering a single leaf costs nothing.  On a fresh or cleared tree
    (zero total requests) an internal node prices at the maximum 1.0.
    """
    if node.leaf_count == 1:
        return 0.0
    total = dgh.total_requests
    if total == 0:
        return 1.0
    return node.rnc / total


# ---------------------------------------------------------------------------
# Set-level loss


@dataclass(frozen=True)
class AttributeLoss:
    attribute_index: int
    raw_loss: float
    weight: float
    weighted_loss: float


@dataclass(frozen=True)
class LossBreakdown:
    """Per-attribute losses of one tuple set plus their weighted mean.

    ``per_attribute`` holds one entry per quasi-identifier attribute; the
    total is the arithmetic mean of the weighted losses (0.0 when the rule
    set defines no quasi-identifiers).
    """

    per_attribute: tuple[AttributeLoss, ...]
    total: float


def _leaf_label(value: AttributeValue, index: int) -> str:
    if isinstance(value, Categorical):
        return value.label
    if isinstance(value, CategoricalWithPath):
        return value.leaf
    raise InvariantError(f"attribute {index}: expected a categorical value, got {value!r}")


def _numeric_value(value: AttributeValue, index: int) -> float:
    if isinstance(value, Numeric):
        return value.value
    raise InvariantError(f"attribute {index}: expected a numeric value, got {value!r}")


def categorical_raw_loss(
    node: DGHNode, dgh: DGH, metric: LossMetric, universe_size: int | None
) -> float:
    if metric is LossMetric.GLM:
        return glm_categorical(node, dgh)
    if metric is LossMetric.NCP:
        return ncp_categorical(node, universe_size or dgh.leaf_count_total)
    return prl(node, dgh)


def tuple_set_loss(
    tuples: Sequence[DataTuple] | Iterable[DataTuple],
    rules: Sequence[GeneralizationRule],
    context: Mapping[int, AttributeContext],
) -> LossBreakdown:
    """Loss of the generalization a tuple set would require.

    Numeric quasi-identifiers generalize to their member envelope
    [min, max]; categorical ones to the lowest common ancestor of the member
    values inside the context's hierarchy; suppressed quasi-identifiers cost
    the full 1.0.  Raises UnknownLeaf / DomainViolation from the underlying
    metrics and InvariantError when context entries are missing or typed
    wrong.
    """
    members = list(tuples)
    if not members:
        raise InvariantError("tuple_set_loss needs at least one tuple")

    entries: list[AttributeLoss] = []
    for rule in rules:
        if not rule.is_quasi_identifier:
            continue
        idx = rule.attribute_index
        if rule.kind is RuleKind.SUPPRESS:
            raw = 1.0
        elif rule.kind is RuleKind.INTERVAL:
            ctx = context.get(idx)
            if not isinstance(ctx, NumericDomain):
                raise InvariantError(f"attribute {idx}: numeric domain context missing")
            values = [_numeric_value(t.attributes[idx], idx) for t in members]
            raw = glm_numeric(min(values), max(values), ctx)
        elif rule.kind is RuleKind.DGH:
            ctx = context.get(idx)
            if not isinstance(ctx, CategoricalContext):
                raise InvariantError(f"attribute {idx}: hierarchy context missing")
            labels = [_leaf_label(t.attributes[idx], idx) for t in members]
            node = ctx.dgh.lowest_common_ancestor(labels)
            raw = categorical_raw_loss(node, ctx.dgh, rule.loss_metric, ctx.universe_size)
        else:  # passthrough quasi-identifiers are rejected at rule construction
            raise InvariantError(f"attribute {idx}: passthrough cannot be a quasi-identifier")
        entries.append(AttributeLoss(idx, raw, rule.weight, raw * rule.weight))

    if entries:
        total = sum(e.weighted_loss for e in entries) / len(entries)
    else:
        total = 0.0
    return LossBreakdown(tuple(entries), total)


def enlargement(
    cluster_tuples: Sequence[DataTuple],
    candidate: DataTuple,
    rules: Sequence[GeneralizationRule],
    context: Mapping[int, AttributeContext],
) -> float:
    """Loss growth from admitting ``candidate``, clamped at zero.

    The metrics are monotone, so a genuine negative is impossible; the clamp
    guards float noise.  An empty cluster enlarges by 0.
    """
    if not cluster_tuples:
        return 0.0
    before = tuple_set_loss(cluster_tuples, rules, context).total
    after = tuple_set_loss(list(cluster_tuples) + [candidate], rules, context).total
    return max(0.0, after - before)
