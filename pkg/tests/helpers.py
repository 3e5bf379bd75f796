"""Shared test fixtures: brute-force oracles and random-data strategies.

The oracles recompute everything from first principles (tree structure and
direct observation counts only) so library bugs cannot leak into the
expected values.
"""

from __future__ import annotations

import random
import string

from hypothesis import strategies as st

from anonstream.core import (
    Categorical,
    CategoricalWithPath,
    DataTuple,
    GeneralizationRule,
    LossMetric,
    Numeric,
    RuleKind,
)
from anonstream.hierarchy import DGH, DGHNode


def dt(message_id, subject, arrival_index, *attrs, ts: float = 0.0) -> DataTuple:
    """Terse DataTuple builder: floats become Numeric, strings Categorical,
    tuples CategoricalWithPath."""
    values = []
    for a in attrs:
        if isinstance(a, (int, float)):
            values.append(Numeric(float(a)))
        elif isinstance(a, str):
            values.append(Categorical(a))
        elif isinstance(a, tuple):
            values.append(CategoricalWithPath(a))
        else:
            values.append(a)
    return DataTuple(message_id, subject, arrival_index, ts, tuple(values))


# ---------------------------------------------------------------------------
# Brute-force oracles over DGH instances


def subtree_nodes(node: DGHNode) -> list[DGHNode]:
    out = [node]
    for child in node.children.values():
        out.extend(subtree_nodes(child))
    return out


def brute_leaves(node: DGHNode) -> list[str]:
    return [n.label for n in subtree_nodes(node) if not n.children]


def brute_leaf_count(node: DGHNode) -> int:
    return len(brute_leaves(node))


def brute_coverage(node: DGHNode) -> int:
    return sum(n.direct_coverage for n in subtree_nodes(node))


def brute_rnc(node: DGHNode) -> int:
    return sum(n.direct_rnc for n in subtree_nodes(node))


def brute_lca(dgh: DGH, labels) -> DGHNode:
    """Deepest node whose subtree contains every label (checked exhaustively)."""
    assert dgh.root is not None
    targets = set(labels)
    covering = []
    for node in subtree_nodes(dgh.root):
        have = {n.label for n in subtree_nodes(node)}
        if targets <= have:
            covering.append(node)
    assert covering, f"no node covers {targets}"
    return max(covering, key=lambda n: n.depth())


def brute_glm(node: DGHNode, dgh: DGH) -> float:
    total = brute_leaf_count(dgh.root)
    if total <= 1:
        return 0.0
    return (brute_leaf_count(node) - 1) / (total - 1)


def brute_ncp(node: DGHNode, a_cat_size: int) -> float:
    card = brute_leaf_count(node)
    if card == 1:
        return 0.0
    return min(1.0, card / a_cat_size)


def brute_prl(node: DGHNode, dgh: DGH) -> float:
    if brute_leaf_count(node) == 1:
        return 0.0
    total = brute_rnc(dgh.root)
    if total == 0:
        return 1.0
    return brute_rnc(node) / total


# ---------------------------------------------------------------------------
# Random taxonomy generation


def random_taxonomy(rng: random.Random, max_leaves: int = 12) -> list[tuple[str, ...]]:
    """Random single-rooted taxonomy, returned as leaf-first root paths."""
    n_nodes = rng.randint(1, max_leaves * 2)
    labels = [f"n{i}" for i in range(n_nodes)]
    parent: dict[str, str | None] = {labels[0]: None}
    for label in labels[1:]:
        parent[label] = rng.choice(list(parent))
    children: dict[str | None, list[str]] = {}
    for label, par in parent.items():
        children.setdefault(par, []).append(label)

    def chain(label: str) -> tuple[str, ...]:
        out = [label]
        while parent[out[-1]] is not None:
            out.append(parent[out[-1]])  # type: ignore[arg-type]
        return tuple(out)

    leaves = [l for l in labels if l not in children]
    paths = [chain(l) for l in leaves]
    # cap the leaf universe
    return paths[:max_leaves] if len(paths) > max_leaves else paths


@st.composite
def taxonomy_paths(draw, max_leaves: int = 12) -> list[tuple[str, ...]]:
    seed = draw(st.integers(min_value=0, max_value=2**32 - 1))
    return random_taxonomy(random.Random(seed), max_leaves=max_leaves)


@st.composite
def populated_dgh(draw, max_leaves: int = 12):
    """A DGH built from a random taxonomy with random observation counts."""
    paths = draw(st.lists(st.sampled_from(draw(taxonomy_paths(max_leaves))), min_size=1, max_size=30))
    tree = DGH()
    for p in paths:
        tree.insert_path(p)
    return tree


def qi_interval(index: int, weight: float = 1.0, domain=None) -> GeneralizationRule:
    return GeneralizationRule(
        attribute_index=index,
        kind=RuleKind.INTERVAL,
        weight=weight,
        is_quasi_identifier=True,
        domain=domain,
    )


def qi_dgh(
    index: int,
    metric: LossMetric = LossMetric.GLM,
    weight: float = 1.0,
    universe_size=None,
) -> GeneralizationRule:
    return GeneralizationRule(
        attribute_index=index,
        kind=RuleKind.DGH,
        loss_metric=metric,
        weight=weight,
        is_quasi_identifier=True,
        universe_size=universe_size,
    )


def sensitive_passthrough(index: int) -> GeneralizationRule:
    return GeneralizationRule(
        attribute_index=index, kind=RuleKind.PASSTHROUGH, is_sensitive=True
    )


def run_stream(engine, tuples, *, per_step=None):
    """Ingest everything, flush, and return all releases in order."""
    out = []
    for t in tuples:
        released = engine.ingest(t)
        out.extend(released)
        if per_step is not None:
            per_step(t, released)
    out.extend(engine.flush())
    return out


def strip_clock(rows):
    """Release rows minus the wall-clock fields, for determinism compares."""
    return [
        (
            r.message_id,
            r.subject_key,
            r.generalized_attributes,
            r.cluster_id,
            r.suppressed,
            r.per_attribute_loss,
            r.arrival_index,
            r.egress_index,
        )
        for r in rows
    ]
