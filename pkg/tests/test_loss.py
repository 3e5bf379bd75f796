"""Metric values, set-level loss and enlargement against brute-force oracles."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from anonstream.core import InvariantError, LossMetric
from anonstream.hierarchy import DGH, UnknownLeaf
from anonstream.loss import (
    CategoricalContext,
    DomainViolation,
    NumericDomain,
    enlargement,
    glm_categorical,
    glm_numeric,
    ncp_categorical,
    prl,
    tuple_set_loss,
)

from helpers import (
    brute_glm,
    brute_ncp,
    brute_prl,
    dt,
    qi_dgh,
    qi_interval,
    subtree_nodes,
    taxonomy_paths,
)


def seven_leaf_tree() -> DGH:
    """any -> A{a1,a2,a3}, B{b1,b2}, c1, c2 with one observation per leaf."""
    tree = DGH()
    for leaf, branch in [
        ("a1", "A"), ("a2", "A"), ("a3", "A"),
        ("b1", "B"), ("b2", "B"),
    ]:
        tree.insert_path((leaf, branch, "any"))
    tree.insert_path(("c1", "any"))
    tree.insert_path(("c2", "any"))
    return tree


class TestGlmNumeric:
    def test_ratio(self):
        assert glm_numeric(10.0, 20.0, NumericDomain(0.0, 100.0)) == pytest.approx(0.1)

    def test_point_domain_is_free(self):
        assert glm_numeric(5.0, 5.0, NumericDomain(5.0, 5.0)) == 0.0

    def test_full_domain_costs_one(self):
        assert glm_numeric(0.0, 100.0, NumericDomain(0.0, 100.0)) == 1.0

    def test_out_of_domain_interval_raises(self):
        with pytest.raises(DomainViolation):
            glm_numeric(-1.0, 5.0, NumericDomain(0.0, 100.0))

    def test_inverted_interval_raises(self):
        with pytest.raises(InvariantError):
            glm_numeric(6.0, 5.0, NumericDomain(0.0, 100.0))


class TestGlmCategorical:
    def test_leaf_costs_nothing(self):
        tree = seven_leaf_tree()
        assert glm_categorical(tree.node_by_label("a1"), tree) == 0.0

    def test_three_leaf_branch_in_seven_leaf_tree(self):
        tree = seven_leaf_tree()
        assert glm_categorical(tree.node_by_label("A"), tree) == pytest.approx(2 / 6)

    def test_root_costs_one(self):
        tree = seven_leaf_tree()
        assert glm_categorical(tree.root, tree) == 1.0

    def test_single_leaf_universe_costs_nothing(self):
        tree = DGH()
        tree.insert_path(("Paris", "France", "EU"))
        assert glm_categorical(tree.node_by_label("EU"), tree) == 0.0


class TestNcp:
    def test_leaf_costs_nothing(self):
        tree = seven_leaf_tree()
        assert ncp_categorical(tree.node_by_label("b1"), 7) == 0.0

    def test_full_universe_costs_one(self):
        tree = seven_leaf_tree()
        assert ncp_categorical(tree.root, 7) == 1.0

    def test_partial_cover(self):
        tree = seven_leaf_tree()
        tree.insert_path(("a4", "A", "any"))  # A now has 4 leaves
        assert ncp_categorical(tree.node_by_label("A"), 7) == pytest.approx(4 / 7)

    def test_undersized_universe_clamps(self):
        tree = seven_leaf_tree()
        assert ncp_categorical(tree.root, 3) == 1.0

    def test_invalid_universe(self):
        tree = seven_leaf_tree()
        with pytest.raises(InvariantError):
            ncp_categorical(tree.root, 0)


class TestPrl:
    def test_leaf_costs_nothing(self):
        tree = seven_leaf_tree()
        assert prl(tree.node_by_label("c1"), tree) == 0.0

    def test_request_share(self):
        tree = seven_leaf_tree()  # 7 observations, one per leaf
        for _ in range(3):
            tree.insert_path(("a1", "A", "any"))  # A now holds 6 of 10
        assert prl(tree.node_by_label("A"), tree) == pytest.approx(6 / 10)

    def test_internal_node_on_cleared_tree_costs_one(self):
        tree = seven_leaf_tree()
        tree.clear_rnc()
        assert prl(tree.node_by_label("A"), tree) == 1.0
        assert prl(tree.node_by_label("a1"), tree) == 0.0

    def test_root_costs_one(self):
        tree = seven_leaf_tree()
        assert prl(tree.root, tree) == 1.0

    def test_single_leaf_internal_chain_costs_nothing(self):
        tree = DGH()
        tree.insert_path(("Paris", "France", "EU"))
        assert prl(tree.node_by_label("France"), tree) == 0.0


class TestTupleSetLoss:
    def two_leaf_context(self):
        tree = DGH()
        tree.insert_path(("Paris", "France", "EU"))
        tree.insert_path(("Madrid", "Spain", "EU"))
        return {0: CategoricalContext(tree)}

    def test_two_cities_blanket_a_two_leaf_tree(self):
        ctx = self.two_leaf_context()
        tuples = [dt(0, "a", 0, ("Paris", "France", "EU")), dt(1, "b", 1, ("Madrid", "Spain", "EU"))]
        breakdown = tuple_set_loss(tuples, [qi_dgh(0)], ctx)
        assert breakdown.total == 1.0

    def test_singleton_costs_nothing(self):
        ctx = self.two_leaf_context()
        breakdown = tuple_set_loss([dt(0, "a", 0, ("Paris", "France", "EU"))], [qi_dgh(0)], ctx)
        assert breakdown.total == 0.0

    def test_numeric_envelope(self):
        rules = [qi_interval(0)]
        ctx = {0: NumericDomain(0.0, 100.0)}
        tuples = [dt(0, "a", 0, 10.0), dt(1, "b", 1, 20.0), dt(2, "c", 2, 12.0)]
        breakdown = tuple_set_loss(tuples, rules, ctx)
        assert breakdown.total == pytest.approx(0.1)

    def test_weight_scales_contribution(self):
        ctx = self.two_leaf_context()
        tuples = [dt(0, "a", 0, ("Paris", "France", "EU")), dt(1, "b", 1, ("Madrid", "Spain", "EU"))]
        half = tuple_set_loss(tuples, [qi_dgh(0, weight=0.5)], ctx)
        assert half.total == pytest.approx(0.5)
        assert half.per_attribute[0].raw_loss == 1.0

    def test_suppressed_quasi_identifier_costs_one(self):
        from anonstream.core import GeneralizationRule, RuleKind

        rule = GeneralizationRule(0, RuleKind.SUPPRESS, is_quasi_identifier=True)
        breakdown = tuple_set_loss([dt(0, "a", 0, 5.0)], [rule], {})
        assert breakdown.total == 1.0

    def test_total_averages_weighted_losses(self):
        tree = DGH()
        tree.insert_path(("Paris", "France", "EU"))
        tree.insert_path(("Madrid", "Spain", "EU"))
        rules = [qi_interval(0), qi_dgh(1, weight=0.5)]
        ctx = {0: NumericDomain(0.0, 100.0), 1: CategoricalContext(tree)}
        tuples = [
            dt(0, "a", 0, 10.0, ("Paris", "France", "EU")),
            dt(1, "b", 1, 30.0, ("Madrid", "Spain", "EU")),
        ]
        breakdown = tuple_set_loss(tuples, rules, ctx)
        assert breakdown.total == pytest.approx((0.2 + 0.5) / 2)

    def test_non_quasi_identifiers_do_not_contribute(self):
        from helpers import sensitive_passthrough

        breakdown = tuple_set_loss(
            [dt(0, "a", 0, 5.0), dt(1, "b", 1, 99.0)], [sensitive_passthrough(0)], {}
        )
        assert breakdown.total == 0.0
        assert breakdown.per_attribute == ()

    def test_unknown_value_propagates(self):
        ctx = self.two_leaf_context()
        with pytest.raises(UnknownLeaf):
            tuple_set_loss([dt(0, "a", 0, "Atlantis")], [qi_dgh(0)], ctx)

    def test_missing_context_is_an_error(self):
        with pytest.raises(InvariantError):
            tuple_set_loss([dt(0, "a", 0, 5.0)], [qi_interval(0)], {})

    def test_empty_set_is_an_error(self):
        with pytest.raises(InvariantError):
            tuple_set_loss([], [qi_interval(0)], {0: NumericDomain(0, 1)})


class TestEnlargement:
    def test_known_value_adds_nothing(self):
        tree = DGH()
        tree.insert_path(("Paris", "France", "EU"))
        tree.insert_path(("Madrid", "Spain", "EU"))
        ctx = {0: CategoricalContext(tree)}
        cluster = [dt(0, "a", 0, ("Paris", "France", "EU")), dt(1, "b", 1, ("Madrid", "Spain", "EU"))]
        candidate = dt(2, "c", 2, ("Paris", "France", "EU"))
        assert enlargement(cluster, candidate, [qi_dgh(0)], ctx) == 0.0

    def test_empty_cluster_adds_nothing(self):
        assert enlargement([], dt(0, "a", 0, 5.0), [qi_interval(0)], {}) == 0.0

    def test_numeric_growth(self):
        ctx = {0: NumericDomain(0.0, 100.0)}
        cluster = [dt(0, "a", 0, 10.0), dt(1, "b", 1, 20.0)]
        assert enlargement(cluster, dt(2, "c", 2, 50.0), [qi_interval(0)], ctx) == pytest.approx(0.3)


class TestMetricProperties:
    @given(taxonomy_paths(), st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=100)
    def test_values_match_brute_force_and_stay_in_range(self, paths, seed):
        rng = random.Random(seed)
        tree = DGH()
        for _ in range(rng.randint(1, 25)):
            tree.insert_path(rng.choice(paths))
        acat = max(1, tree.leaf_count_total)
        for node in subtree_nodes(tree.root):
            g = glm_categorical(node, tree)
            n = ncp_categorical(node, acat)
            p = prl(node, tree)
            assert g == pytest.approx(brute_glm(node, tree), abs=1e-12)
            assert n == pytest.approx(brute_ncp(node, acat), abs=1e-12)
            assert p == pytest.approx(brute_prl(node, tree), abs=1e-12)
            for v in (g, n, p):
                assert 0.0 <= v <= 1.0

    @given(taxonomy_paths(), st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=100)
    def test_monotone_along_every_root_to_leaf_path(self, paths, seed):
        rng = random.Random(seed)
        tree = DGH()
        for _ in range(rng.randint(1, 25)):
            tree.insert_path(rng.choice(paths))
        acat = max(1, tree.leaf_count_total)
        for node in subtree_nodes(tree.root):
            if node.parent is None:
                continue
            up = node.parent
            assert glm_categorical(up, tree) >= glm_categorical(node, tree)
            assert ncp_categorical(up, acat) >= ncp_categorical(node, acat)
            assert prl(up, tree) >= prl(node, tree)

    @given(taxonomy_paths(), st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=100)
    def test_superset_loss_never_shrinks(self, paths, seed):
        rng = random.Random(seed)
        tree = DGH.from_paths(paths)
        for p in paths:
            tree.insert_path(p)
        ctx = {0: CategoricalContext(tree), 1: NumericDomain(0.0, 100.0)}
        rules = [qi_dgh(0, metric=rng.choice(list(LossMetric))), qi_interval(1)]
        pool = [
            dt(i, f"s{i}", i, rng.choice(paths), rng.uniform(0, 100))
            for i in range(rng.randint(2, 8))
        ]
        cut = rng.randint(1, len(pool) - 1)
        small, big = pool[:cut], pool
        assert (
            tuple_set_loss(big, rules, ctx).total
            >= tuple_set_loss(small, rules, ctx).total - 1e-12
        )
