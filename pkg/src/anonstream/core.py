"""Domain types shared by every layer of the package.

Attribute values, stream tuples, generalization rules, engine configuration
and released (anonymized) tuples are all small frozen dataclasses.  They
validate their own invariants on construction so that anything accepted here
is safe for the engine to consume.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

MAX_ATTRIBUTES = 25


class AnonStreamError(Exception):
    """Base class for every error raised by this package."""


class InvariantError(AnonStreamError):
    """A domain object violates one of its structural invariants."""


class ConfigError(AnonStreamError):
    """An engine configuration violates a named constraint."""


class ParseError(AnonStreamError):
    """A rules document or data payload could not be parsed."""


# ---------------------------------------------------------------------------
# Attribute values


@dataclass(frozen=True)
class Numeric:
    """A finite numeric attribute value."""

    value: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "value", float(self.value))
        if not math.isfinite(self.value):
            raise InvariantError(f"numeric value must be finite, got {self.value!r}")


@dataclass(frozen=True)
class Categorical:
    """A categorical value carrying only its own label."""

    label: str

    def __post_init__(self) -> None:
        if not isinstance(self.label, str) or not self.label:
            raise InvariantError("categorical label must be a non-empty string")


@dataclass(frozen=True)
class CategoricalWithPath:
    """A categorical value carrying its generalization path.

    The path is ordered leaf first, most general label last, e.g.
    ``("Paris", "France", "EU")``.
    """

    path: tuple[str, ...]

    def __post_init__(self) -> None:
        path = tuple(self.path)
        object.__setattr__(self, "path", path)
        if not path:
            raise InvariantError("hierarchy path must not be empty")
        for label in path:
            if not isinstance(label, str) or not label:
                raise InvariantError("hierarchy path labels must be non-empty strings")
        if len(set(path)) != len(path):
            raise InvariantError(f"hierarchy path labels must be pairwise distinct: {path!r}")

    @property
    def leaf(self) -> str:
        return self.path[0]


AttributeValue = Union[Numeric, Categorical, CategoricalWithPath]


@dataclass(frozen=True)
class DataTuple:
    """One stream record: identity, subject, ordering and attribute payload."""

    message_id: int | str
    subject_key: int | str
    arrival_index: int
    ingress_timestamp: float
    attributes: tuple[AttributeValue, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if self.arrival_index < 0:
            raise InvariantError("arrival_index must be non-negative")
        if len(self.attributes) > MAX_ATTRIBUTES:
            raise InvariantError(
                f"tuple carries {len(self.attributes)} attributes, maximum is {MAX_ATTRIBUTES}"
            )
        for pos, value in enumerate(self.attributes):
            if not isinstance(value, (Numeric, Categorical, CategoricalWithPath)):
                raise InvariantError(f"attribute {pos} is not an AttributeValue: {value!r}")


# ---------------------------------------------------------------------------
# Generalized output values


@dataclass(frozen=True)
class Interval:
    """A closed numeric range replacing the exact values of a cluster."""

    low: float
    high: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "low", float(self.low))
        object.__setattr__(self, "high", float(self.high))
        if not (math.isfinite(self.low) and math.isfinite(self.high)):
            raise InvariantError("interval bounds must be finite")
        if self.low > self.high:
            raise InvariantError(f"interval low {self.low} exceeds high {self.high}")


@dataclass(frozen=True)
class Node:
    """A generalization to a hierarchy node covering a set of leaf labels."""

    label: str
    leaf_labels: frozenset[str]

    def __post_init__(self) -> None:
        object.__setattr__(self, "leaf_labels", frozenset(self.leaf_labels))
        if not self.label:
            raise InvariantError("node label must be non-empty")


@dataclass(frozen=True)
class Exact:
    """An attribute emitted unchanged."""

    value: AttributeValue


@dataclass(frozen=True)
class Redacted:
    """An attribute removed from the output entirely."""


REDACTED = Redacted()

GeneralizedValue = Union[Interval, Node, Exact, Redacted]


# ---------------------------------------------------------------------------
# Rules


class RuleKind(enum.Enum):
    INTERVAL = "interval"
    DGH = "dgh"
    PASSTHROUGH = "passthrough"
    SUPPRESS = "suppress"


class LossMetric(enum.Enum):
    GLM = "glm"
    NCP = "ncp"
    PRL = "prl"


@dataclass(frozen=True)
class GeneralizationRule:
    """Per-attribute treatment: how to generalize and how to price the loss.

    weight scales the attribute's contribution to a cluster's total loss and
    must lie in [0, 1].  loss_metric only matters for DGH rules; interval
    rules always use the domain-ratio loss.  An attribute can be sensitive or
    a quasi-identifier, never both.

    Optional extras:

    - ``domain``: fixed (lower, upper) bounds for an interval rule; without
      it the engine tracks the observed running domain.
    - ``universe_size``: fixed |A_Cat| for the NCP metric; defaults to the
      evaluating hierarchy's current leaf total.
    - ``hierarchy_paths``: seed hierarchy as leaf-first root paths, used to
      resolve bare categorical labels and to pre-shape cluster hierarchies.
    """

    attribute_index: int
    kind: RuleKind
    loss_metric: LossMetric = LossMetric.GLM
    weight: float = 1.0
    is_sensitive: bool = False
    is_quasi_identifier: bool = False
    domain: tuple[float, float] | None = None
    universe_size: int | None = None
    hierarchy_paths: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self) -> None:
        if self.attribute_index < 0:
            raise InvariantError("attribute_index must be non-negative")
        object.__setattr__(self, "weight", float(self.weight))
        if not (0.0 <= self.weight <= 1.0) or not math.isfinite(self.weight):
            raise InvariantError(f"rule weight must lie in [0, 1], got {self.weight}")
        if self.is_sensitive and self.is_quasi_identifier:
            raise InvariantError(
                f"attribute {self.attribute_index} cannot be sensitive and a quasi-identifier"
            )
        if self.is_quasi_identifier and self.kind is RuleKind.PASSTHROUGH:
            raise InvariantError(
                f"attribute {self.attribute_index}: a passthrough quasi-identifier would "
                "break the uniform-generalization guarantee"
            )
        if self.domain is not None:
            if self.kind is not RuleKind.INTERVAL:
                raise InvariantError("domain bounds only apply to interval rules")
            low, high = float(self.domain[0]), float(self.domain[1])
            if not (math.isfinite(low) and math.isfinite(high)) or low > high:
                raise InvariantError(f"invalid domain bounds ({low}, {high})")
            object.__setattr__(self, "domain", (low, high))
        if self.universe_size is not None:
            if self.kind is not RuleKind.DGH:
                raise InvariantError("universe_size only applies to dgh rules")
            if self.universe_size < 1:
                raise InvariantError("universe_size must be positive")
        paths = tuple(tuple(p) for p in self.hierarchy_paths)
        object.__setattr__(self, "hierarchy_paths", paths)
        if paths and self.kind is not RuleKind.DGH:
            raise InvariantError("a hierarchy seed only applies to dgh rules")


# ---------------------------------------------------------------------------
# Engine configuration


@dataclass(frozen=True)
class EngineConfig:
    """Anonymization parameters for one engine instance.

    ``tau=None`` selects the adaptive threshold (running mean of released
    cluster losses); ``rnc_clear_period=None`` never clears request counts.
    """

    k: int
    l: int
    delta: int
    beta: int
    tau: float | None = None
    rnc_clear_period: int | None = None


def validate_config(config: EngineConfig) -> EngineConfig:
    """Return the config unchanged or raise ConfigError naming the violation."""
    if config.k < 1:
        raise ConfigError(f"k must be at least 1, got {config.k}")
    if config.l < 1:
        raise ConfigError(f"l must be at least 1, got {config.l}")
    if config.delta < config.k:
        raise ConfigError(f"delta ({config.delta}) must be at least k ({config.k})")
    if config.beta < 1:
        raise ConfigError(f"beta must be at least 1, got {config.beta}")
    if config.tau is not None:
        if not math.isfinite(config.tau) or config.tau < 0:
            raise ConfigError(f"tau must be non-negative and finite, got {config.tau}")
    if config.rnc_clear_period is not None and config.rnc_clear_period < 1:
        raise ConfigError(
            f"rnc_clear_period must be positive, got {config.rnc_clear_period}"
        )
    return config


# ---------------------------------------------------------------------------
# Released tuples


@dataclass(frozen=True)
class ReleasedTuple:
    """An anonymized record leaving the engine.

    per_attribute_loss holds the raw (unweighted) loss at quasi-identifier
    positions and 0.0 elsewhere.  arrival_index/egress_index measure latency
    in ingestion steps; the timestamps measure it in wall-clock seconds.
    """

    message_id: int | str
    subject_key: int | str
    generalized_attributes: tuple[GeneralizedValue, ...]
    cluster_id: str
    suppressed: bool
    per_attribute_loss: tuple[float, ...]
    egress_timestamp: float
    arrival_index: int
    egress_index: int
    ingress_timestamp: float

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "generalized_attributes", tuple(self.generalized_attributes)
        )
        losses = tuple(float(x) for x in self.per_attribute_loss)
        object.__setattr__(self, "per_attribute_loss", losses)
        for pos, loss in enumerate(losses):
            if not (0.0 <= loss <= 1.0):
                raise InvariantError(f"per-attribute loss {loss} at {pos} outside [0, 1]")


# ---------------------------------------------------------------------------
# Rule document parsing

_RULE_KEYS = {
    "index",
    "kind",
    "metric",
    "weight",
    "sensitive",
    "quasiIdentifier",
    "domain",
    "universeSize",
    "hierarchy",
    "hierarchyFile",
}


def _hierarchy_to_paths(
    node: Any, trail: tuple[str, ...] = ()
) -> list[tuple[str, ...]]:
    """Flatten a nested ``{label, children}`` tree into leaf-first root paths."""
    if not isinstance(node, dict) or "label" not in node:
        raise ParseError(f"hierarchy nodes need a 'label' field, got {node!r}")
    extra = set(node) - {"label", "children"}
    if extra:
        raise ParseError(f"unknown hierarchy node keys: {sorted(extra)}")
    label = node["label"]
    if not isinstance(label, str) or not label:
        raise ParseError("hierarchy labels must be non-empty strings")
    children = node.get("children", [])
    if not isinstance(children, list):
        raise ParseError("hierarchy 'children' must be a list")
    here = (label,) + trail
    if not children:
        return [here]
    paths: list[tuple[str, ...]] = []
    for child in children:
        paths.extend(_hierarchy_to_paths(child, here))
    return paths


def _paths_to_hierarchy(paths: tuple[tuple[str, ...], ...]) -> dict[str, Any]:
    """Rebuild a canonical nested tree from leaf-first root paths."""
    children_of: dict[str | None, dict[str, None]] = {}

    def note(parent: str | None, child: str) -> None:
        children_of.setdefault(parent, {})[child] = None

    for path in paths:
        rooted = list(reversed(path))
        note(None, rooted[0])
        for parent, child in zip(rooted, rooted[1:]):
            note(parent, child)

    roots = list(children_of.get(None, {}))
    if len(roots) != 1:
        raise InvariantError(f"hierarchy seed must have a single root, got {roots}")

    def build(label: str) -> dict[str, Any]:
        kids = sorted(children_of.get(label, {}))
        if not kids:
            return {"label": label}
        return {"label": label, "children": [build(k) for k in kids]}

    return build(roots[0])


def _parse_one_rule(obj: Any, position: int, base_dir: Path | None) -> GeneralizationRule:
    if not isinstance(obj, dict):
        raise ParseError(f"rule {position} is not an object: {obj!r}")
    extra = set(obj) - _RULE_KEYS
    if extra:
        raise ParseError(f"rule {position} has unknown keys: {sorted(extra)}")
    if "index" not in obj or not isinstance(obj["index"], int) or isinstance(obj["index"], bool):
        raise ParseError(f"rule {position} needs an integer 'index'")
    if "kind" not in obj:
        raise ParseError(f"rule {position} needs a 'kind'")
    try:
        kind = RuleKind(obj["kind"])
    except ValueError:
        raise ParseError(
            f"rule {position}: unknown kind {obj['kind']!r}, expected one of "
            f"{sorted(k.value for k in RuleKind)}"
        ) from None
    try:
        metric = LossMetric(obj.get("metric", "glm"))
    except ValueError:
        raise ParseError(
            f"rule {position}: unknown metric {obj.get('metric')!r}, expected one of "
            f"{sorted(m.value for m in LossMetric)}"
        ) from None

    domain = None
    if "domain" in obj:
        raw = obj["domain"]
        if (
            not isinstance(raw, list)
            or len(raw) != 2
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in raw)
        ):
            raise ParseError(f"rule {position}: 'domain' must be a [lower, upper] pair")
        domain = (float(raw[0]), float(raw[1]))

    paths: tuple[tuple[str, ...], ...] = ()
    if "hierarchy" in obj and "hierarchyFile" in obj:
        raise ParseError(f"rule {position}: give 'hierarchy' or 'hierarchyFile', not both")
    if "hierarchy" in obj:
        paths = tuple(_hierarchy_to_paths(obj["hierarchy"]))
    elif "hierarchyFile" in obj:
        if base_dir is None:
            raise ParseError(
                f"rule {position}: 'hierarchyFile' needs the document's directory; "
                "parse with base_dir set"
            )
        target = base_dir / str(obj["hierarchyFile"])
        try:
            nested = json.loads(target.read_text())
        except OSError as exc:
            raise ParseError(f"rule {position}: cannot read {target}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ParseError(f"rule {position}: {target} is not valid JSON: {exc}") from exc
        paths = tuple(_hierarchy_to_paths(nested))

    weight = obj.get("weight", 1.0)
    if not isinstance(weight, (int, float)) or isinstance(weight, bool):
        raise ParseError(f"rule {position}: 'weight' must be a number")
    for flag in ("sensitive", "quasiIdentifier"):
        if flag in obj and not isinstance(obj[flag], bool):
            raise ParseError(f"rule {position}: '{flag}' must be a boolean")
    if "universeSize" in obj and (
        not isinstance(obj["universeSize"], int) or isinstance(obj["universeSize"], bool)
    ):
        raise ParseError(f"rule {position}: 'universeSize' must be an integer")

    return GeneralizationRule(
        attribute_index=obj["index"],
        kind=kind,
        loss_metric=metric,
        weight=float(weight),
        is_sensitive=obj.get("sensitive", False),
        is_quasi_identifier=obj.get("quasiIdentifier", False),
        domain=domain,
        universe_size=obj.get("universeSize"),
        hierarchy_paths=paths,
    )


def parse_rule_document(
    text: str, base_dir: str | Path | None = None
) -> tuple[GeneralizationRule, ...]:
    """Parse a JSON rules document into rules sorted by attribute index.

    The document is either a bare array of rule objects or an object with a
    ``rules`` array (plus an optional ``mapping`` section, which is ignored
    here and consumed by the replay harness).  When several rules target the
    same index the last one wins.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"rules document is not valid JSON: {exc}") from exc

    if isinstance(doc, dict):
        extra = set(doc) - {"rules", "mapping"}
        if extra:
            raise ParseError(f"unknown top-level keys in rules document: {sorted(extra)}")
        if "rules" not in doc:
            raise ParseError("rules document object needs a 'rules' array")
        raw_rules = doc["rules"]
    else:
        raw_rules = doc
    if not isinstance(raw_rules, list):
        raise ParseError("rules must be a JSON array")

    base = Path(base_dir) if base_dir is not None else None
    by_index: dict[int, GeneralizationRule] = {}
    for position, obj in enumerate(raw_rules):
        rule = _parse_one_rule(obj, position, base)
        by_index[rule.attribute_index] = rule
    return tuple(by_index[i] for i in sorted(by_index))


def serialize_rules(rules: tuple[GeneralizationRule, ...] | list[GeneralizationRule]) -> str:
    """Render rules as a canonical JSON array accepted by parse_rule_document."""
    out: list[dict[str, Any]] = []
    for rule in sorted(rules, key=lambda r: r.attribute_index):
        obj: dict[str, Any] = {
            "index": rule.attribute_index,
            "kind": rule.kind.value,
            "metric": rule.loss_metric.value,
            "weight": rule.weight,
            "sensitive": rule.is_sensitive,
            "quasiIdentifier": rule.is_quasi_identifier,
        }
        if rule.domain is not None:
            obj["domain"] = list(rule.domain)
        if rule.universe_size is not None:
            obj["universeSize"] = rule.universe_size
        if rule.hierarchy_paths:
            obj["hierarchy"] = _paths_to_hierarchy(rule.hierarchy_paths)
        out.append(obj)
    return json.dumps(out, indent=2)
