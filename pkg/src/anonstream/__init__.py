"""Streaming k-anonymization with dynamic generalization hierarchies.

The package is organized around six layers:

- :mod:`anonstream.core` shared domain types, config validation, rule parsing
- :mod:`anonstream.hierarchy` dynamically extensible generalization trees
- :mod:`anonstream.loss` information-loss metrics and enlargement
- :mod:`anonstream.engine` the cluster/release state machine
- :mod:`anonstream.pipeline` subject-keyed partitioning over several engines
- :mod:`anonstream.harness` CSV replay, socket serving, run reports
"""

from anonstream.core import (
    AnonStreamError,
    Categorical,
    CategoricalWithPath,
    ConfigError,
    DataTuple,
    EngineConfig,
    Exact,
    GeneralizationRule,
    Interval,
    InvariantError,
    LossMetric,
    Node,
    Numeric,
    ParseError,
    REDACTED,
    Redacted,
    ReleasedTuple,
    RuleKind,
    parse_rule_document,
    serialize_rules,
    validate_config,
)
from anonstream.engine import AnonymizationEngine, NoRules
from anonstream.harness import (
    ColumnMapping,
    RunReport,
    SchemaError,
    compute_report,
    load_rules_document,
    parse_mapping,
    render_value,
    replay,
    write_output_csv,
)
from anonstream.hierarchy import DGH, DGHNode, HierarchyConflict, UnknownLeaf
from anonstream.loss import DomainViolation, LossBreakdown, NumericDomain
from anonstream.pipeline import PartitionedPipeline
from anonstream.server import AnonymizationServer, StreamSession

__all__ = [
    "AnonStreamError",
    "AnonymizationEngine",
    "AnonymizationServer",
    "Categorical",
    "CategoricalWithPath",
    "ColumnMapping",
    "ConfigError",
    "DGH",
    "DGHNode",
    "DataTuple",
    "DomainViolation",
    "EngineConfig",
    "Exact",
    "GeneralizationRule",
    "HierarchyConflict",
    "Interval",
    "InvariantError",
    "LossBreakdown",
    "LossMetric",
    "NoRules",
    "Node",
    "Numeric",
    "NumericDomain",
    "ParseError",
    "PartitionedPipeline",
    "REDACTED",
    "Redacted",
    "ReleasedTuple",
    "RuleKind",
    "RunReport",
    "SchemaError",
    "StreamSession",
    "UnknownLeaf",
    "compute_report",
    "load_rules_document",
    "parse_mapping",
    "parse_rule_document",
    "render_value",
    "replay",
    "serialize_rules",
    "validate_config",
    "write_output_csv",
]
