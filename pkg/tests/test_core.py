"""Domain type invariants, config validation and rules-document parsing."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from anonstream.core import (
    Categorical,
    CategoricalWithPath,
    ConfigError,
    DataTuple,
    EngineConfig,
    GeneralizationRule,
    Interval,
    InvariantError,
    LossMetric,
    Node,
    Numeric,
    ParseError,
    ReleasedTuple,
    RuleKind,
    parse_rule_document,
    serialize_rules,
    validate_config,
)


class TestAttributeValues:
    def test_numeric_coerces_to_float(self):
        assert Numeric(3).value == 3.0

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), float("-inf")])
    def test_numeric_rejects_non_finite(self, bad):
        with pytest.raises(InvariantError):
            Numeric(bad)

    def test_categorical_rejects_empty_label(self):
        with pytest.raises(InvariantError):
            Categorical("")

    def test_path_is_leaf_first(self):
        v = CategoricalWithPath(("Paris", "France", "EU"))
        assert v.leaf == "Paris"

    def test_path_rejects_duplicates(self):
        with pytest.raises(InvariantError):
            CategoricalWithPath(("Paris", "France", "Paris"))

    def test_path_rejects_empty(self):
        with pytest.raises(InvariantError):
            CategoricalWithPath(())

    @given(st.lists(st.text(max_size=4), min_size=1, max_size=6))
    def test_path_fuzz_accepts_only_valid(self, labels):
        valid = all(labels) and len(set(labels)) == len(labels)
        if valid:
            assert CategoricalWithPath(tuple(labels)).path == tuple(labels)
        else:
            with pytest.raises(InvariantError):
                CategoricalWithPath(tuple(labels))


class TestDataTuple:
    def test_rejects_more_than_25_attributes(self):
        with pytest.raises(InvariantError):
            DataTuple(0, "s", 0, 0.0, tuple(Numeric(i) for i in range(26)))

    def test_accepts_25_attributes(self):
        t = DataTuple(0, "s", 0, 0.0, tuple(Numeric(i) for i in range(25)))
        assert len(t.attributes) == 25

    def test_rejects_plain_python_values(self):
        with pytest.raises(InvariantError):
            DataTuple(0, "s", 0, 0.0, (42,))  # type: ignore[arg-type]

    def test_rejects_negative_arrival_index(self):
        with pytest.raises(InvariantError):
            DataTuple(0, "s", -1, 0.0, ())


class TestConfigValidation:
    def test_benchmark_style_config_is_valid(self):
        cfg = EngineConfig(k=100, l=2, delta=1250, beta=50)
        assert validate_config(cfg) is cfg

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(k=0, l=1, delta=10, beta=1),
            dict(k=2, l=0, delta=10, beta=1),
            dict(k=5, l=1, delta=4, beta=1),  # delta below k
            dict(k=2, l=1, delta=10, beta=0),
            dict(k=2, l=1, delta=10, beta=1, tau=-0.5),
            dict(k=2, l=1, delta=10, beta=1, rnc_clear_period=0),
        ],
    )
    def test_invalid_configs_raise(self, kwargs):
        with pytest.raises(ConfigError):
            validate_config(EngineConfig(**kwargs))

    def test_auto_tau_and_never_clear_are_valid(self):
        validate_config(EngineConfig(k=1, l=1, delta=1, beta=1, tau=None, rnc_clear_period=None))


class TestGeneralizationRule:
    def test_sensitive_quasi_identifier_conflict(self):
        with pytest.raises(InvariantError):
            GeneralizationRule(0, RuleKind.INTERVAL, is_sensitive=True, is_quasi_identifier=True)

    def test_passthrough_quasi_identifier_rejected(self):
        with pytest.raises(InvariantError):
            GeneralizationRule(0, RuleKind.PASSTHROUGH, is_quasi_identifier=True)

    @pytest.mark.parametrize("weight", [-0.1, 1.5, float("nan")])
    def test_weight_out_of_range(self, weight):
        with pytest.raises(InvariantError):
            GeneralizationRule(0, RuleKind.INTERVAL, weight=weight)

    def test_domain_only_for_interval(self):
        with pytest.raises(InvariantError):
            GeneralizationRule(0, RuleKind.DGH, domain=(0.0, 1.0))

    def test_universe_size_only_for_dgh(self):
        with pytest.raises(InvariantError):
            GeneralizationRule(0, RuleKind.INTERVAL, universe_size=5)

    def test_inverted_domain_rejected(self):
        with pytest.raises(InvariantError):
            GeneralizationRule(0, RuleKind.INTERVAL, domain=(2.0, 1.0))


class TestGeneralizedValues:
    def test_interval_orders_bounds(self):
        with pytest.raises(InvariantError):
            Interval(5.0, 1.0)

    def test_node_holds_leaf_set(self):
        n = Node("EU", frozenset({"Paris", "Madrid"}))
        assert n.leaf_labels == {"Paris", "Madrid"}

    def test_released_tuple_checks_loss_range(self):
        with pytest.raises(InvariantError):
            ReleasedTuple(0, "s", (), "c0", False, (1.5,), 0.0, 0, 1, 0.0)


RULES_DOC = """
[
  {"index": 1, "kind": "dgh", "metric": "prl", "quasiIdentifier": true},
  {"index": 0, "kind": "interval", "weight": 0.5, "quasiIdentifier": true, "domain": [0, 100]},
  {"index": 2, "kind": "passthrough", "sensitive": true},
  {"index": 1, "kind": "dgh", "metric": "ncp", "quasiIdentifier": true, "universeSize": 7}
]
"""


class TestRuleDocumentParsing:
    def test_sorted_and_last_wins(self):
        rules = parse_rule_document(RULES_DOC)
        assert [r.attribute_index for r in rules] == [0, 1, 2]
        assert rules[1].loss_metric is LossMetric.NCP
        assert rules[1].universe_size == 7

    def test_defaults(self):
        (rule,) = parse_rule_document('[{"index": 0, "kind": "dgh"}]')
        assert rule.loss_metric is LossMetric.GLM
        assert rule.weight == 1.0
        assert rule.is_sensitive is False
        assert rule.is_quasi_identifier is False

    def test_object_form_with_mapping(self):
        doc = json.dumps({"rules": [{"index": 0, "kind": "suppress"}], "mapping": {"x": 1}})
        (rule,) = parse_rule_document(doc)
        assert rule.kind is RuleKind.SUPPRESS

    def test_unknown_rule_key_rejected(self):
        with pytest.raises(ParseError):
            parse_rule_document('[{"index": 0, "kind": "dgh", "metrc": "glm"}]')

    def test_unknown_kind_rejected(self):
        with pytest.raises(ParseError):
            parse_rule_document('[{"index": 0, "kind": "bucket"}]')

    def test_malformed_json_rejected(self):
        with pytest.raises(ParseError):
            parse_rule_document("[{]")

    def test_invariant_violations_surface_as_invariant_error(self):
        with pytest.raises(InvariantError):
            parse_rule_document('[{"index": 0, "kind": "interval", "weight": 2.0}]')

    def test_inline_hierarchy_flattens_to_paths(self):
        doc = json.dumps(
            [
                {
                    "index": 0,
                    "kind": "dgh",
                    "hierarchy": {
                        "label": "EU",
                        "children": [
                            {"label": "France", "children": [{"label": "Paris"}]},
                            {"label": "Spain", "children": [{"label": "Madrid"}]},
                        ],
                    },
                }
            ]
        )
        (rule,) = parse_rule_document(doc)
        assert set(rule.hierarchy_paths) == {
            ("Paris", "France", "EU"),
            ("Madrid", "Spain", "EU"),
        }

    def test_hierarchy_file_resolved_against_base_dir(self, tmp_path):
        (tmp_path / "tree.json").write_text(
            json.dumps({"label": "any", "children": [{"label": "x"}, {"label": "y"}]})
        )
        doc = '[{"index": 0, "kind": "dgh", "hierarchyFile": "tree.json"}]'
        (rule,) = parse_rule_document(doc, base_dir=tmp_path)
        assert set(rule.hierarchy_paths) == {("x", "any"), ("y", "any")}
        with pytest.raises(ParseError):
            parse_rule_document(doc)  # no base_dir

    def test_round_trip_is_stable(self):
        rules = parse_rule_document(RULES_DOC)
        text = serialize_rules(rules)
        assert parse_rule_document(text) == rules
        assert serialize_rules(parse_rule_document(text)) == text


@st.composite
def rule_objects(draw):
    kind = draw(st.sampled_from(["interval", "dgh", "passthrough", "suppress"]))
    obj = {"index": draw(st.integers(min_value=0, max_value=24)), "kind": kind}
    if draw(st.booleans()):
        obj["weight"] = draw(st.floats(min_value=0, max_value=1, allow_nan=False))
    if kind in ("interval", "dgh", "suppress") and draw(st.booleans()):
        obj["quasiIdentifier"] = True
    elif draw(st.booleans()):
        obj["sensitive"] = True
    if kind == "dgh":
        if draw(st.booleans()):
            obj["metric"] = draw(st.sampled_from(["glm", "ncp", "prl"]))
        if draw(st.booleans()):
            obj["universeSize"] = draw(st.integers(min_value=1, max_value=100))
    if kind == "interval" and draw(st.booleans()):
        lo = draw(st.integers(min_value=-50, max_value=50))
        obj["domain"] = [lo, lo + draw(st.integers(min_value=0, max_value=100))]
    return obj


class TestRuleRoundTripProperty:
    @given(st.lists(rule_objects(), min_size=0, max_size=8))
    def test_parse_serialize_parse_identity(self, objs):
        rules = parse_rule_document(json.dumps(objs))
        assert parse_rule_document(serialize_rules(rules)) == rules
