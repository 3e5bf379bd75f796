"""The streaming cluster/release state machine.

Tuples are buffered into open clusters grouped by quasi-identifier
similarity.  A cluster is released once its oldest tuple reaches an age of
``delta - 1`` ingestions: released whole when it holds ``k`` distinct
subjects and ``l`` distinct values per sensitive attribute, split first when
it holds at least ``2k`` subjects, merged with the cheapest open neighbours
when it falls short, and failing all that released suppressed under maximal
generalization.

Placement uses an enlargement threshold ``tau``: a tuple joins the open
cluster whose loss grows least if that growth stays within ``tau``,
otherwise a new cluster opens, unless the ``beta`` cap forces the cheapest
join.  ``tau=None`` adapts: it is the running mean of released cluster
losses and behaves as infinity until the first release.

Per categorical rule the engine grows a global knowledge tree from every
observed path.  New clusters snapshot that tree (structure and counts), so
loss metrics see the stream-wide value universe rather than the handful of
values a young cluster happens to hold.  Snapshots also freeze the rule set:
a mid-stream rule update only governs clusters created afterwards, while
privacy checks (k, l) always follow the currently installed rules.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from anonstream.core import (
    AnonStreamError,
    AttributeValue,
    Categorical,
    CategoricalWithPath,
    DataTuple,
    EngineConfig,
    Exact,
    GeneralizationRule,
    GeneralizedValue,
    Interval,
    InvariantError,
    Node,
    Numeric,
    REDACTED,
    ReleasedTuple,
    RuleKind,
    LossMetric,
    validate_config,
)
from anonstream.hierarchy import DGH, DGHNode, SYNTHETIC_ROOT
from anonstream.loss import NumericDomain


class NoRules(AnonStreamError):
    """The engine was asked to ingest before any rule set was installed."""


# ---------------------------------------------------------------------------
# Rule set bookkeeping


class RuleSet:
    """An installed rule set with derived per-kind index lists."""

    __slots__ = (
        "rules",
        "by_index",
        "numeric_qi",
        "categorical_qi",
        "suppress_qi",
        "sensitive",
        "n_qi",
        "suppressed_total",
    )

    def __init__(self, rules: Sequence[GeneralizationRule]):
        ordered = tuple(sorted(rules, key=lambda r: r.attribute_index))
        seen: set[int] = set()
        for rule in ordered:
            if rule.attribute_index in seen:
                raise InvariantError(
                    f"two rules target attribute {rule.attribute_index}; "
                    "collapse duplicates before installing"
                )
            seen.add(rule.attribute_index)
        self.rules = ordered
        self.by_index = {r.attribute_index: r for r in ordered}
        self.numeric_qi = tuple(
            r.attribute_index
            for r in ordered
            if r.is_quasi_identifier and r.kind is RuleKind.INTERVAL
        )
        self.categorical_qi = tuple(
            r.attribute_index
            for r in ordered
            if r.is_quasi_identifier and r.kind is RuleKind.DGH
        )
        self.suppress_qi = tuple(
            r.attribute_index
            for r in ordered
            if r.is_quasi_identifier and r.kind is RuleKind.SUPPRESS
        )
        self.sensitive = tuple(r.attribute_index for r in ordered if r.is_sensitive)
        self.n_qi = len(self.numeric_qi) + len(self.categorical_qi) + len(self.suppress_qi)
        if self.n_qi:
            qi_weight = sum(
                self.by_index[i].weight
                for i in self.numeric_qi + self.categorical_qi + self.suppress_qi
            )
            self.suppressed_total = qi_weight / self.n_qi
        else:
            self.suppressed_total = 0.0


def _value_key(value: AttributeValue):
    """Canonical identity of a value for distinctness counting."""
    if isinstance(value, Numeric):
        return ("n", value.value)
    if isinstance(value, Categorical):
        return ("c", value.label)
    return ("c", value.leaf)


def _lca2(a: DGHNode | None, b: DGHNode) -> DGHNode:
    if a is None:
        return b
    da, db = a.depth(), b.depth()
    while db > da:
        b = b.parent  # type: ignore[assignment]
        db -= 1
    while da > db:
        a = a.parent  # type: ignore[assignment]
        da -= 1
    while a is not b:
        a = a.parent  # type: ignore[assignment]
        b = b.parent  # type: ignore[assignment]
    return a


def _cat_raw(metric: LossMetric, card: int, leaves_total: int, rnc: int, rnc_total: int,
             universe: int | None) -> float:
    """Metric value from hypothetical tree quantities (mirrors loss module)."""
    if metric is LossMetric.GLM:
        if leaves_total <= 1:
            return 0.0
        return (card - 1) / (leaves_total - 1)
    if metric is LossMetric.NCP:
        if card == 1:
            return 0.0
        return min(1.0, card / (universe or leaves_total))
    if card == 1:
        return 0.0
    if rnc_total == 0:
        return 1.0
    return rnc / rnc_total


class _CatState:
    """One cluster's view of one categorical attribute."""

    __slots__ = ("tree", "lca", "labels", "_deltas", "_volatile")

    def __init__(self, tree: DGH):
        self.tree = tree
        self.lca: DGHNode | None = None
        self.labels: list[str] = []
        self._deltas: dict[tuple[str, ...], float] = {}
        # None until the pinned rule is seen; True for the request-frequency
        # metric, whose prices move with every recorded observation
        self._volatile: bool | None = None

    def insert(self, path: tuple[str, ...]) -> None:
        tree = self.tree
        keep = self._volatile is False
        before = (tree.structure_version, self.lca) if keep else None
        settled = self.lca is None or tree.path_is_settled(path)
        end = tree.insert_path(path)
        self.labels.append(path[0])
        if settled:
            self.lca = _lca2(self.lca, end)
        else:
            # the insert re-homed a provisional component; pairwise folding
            # no longer tracks the true common ancestor
            self.lca = tree.lowest_common_ancestor(self.labels)
        # leaf-structure metrics only depend on node ancestry and the fold
        # point, so prices survive inserts that change neither
        if not keep or (tree.structure_version, self.lca) != before:
            self._deltas.clear()

    def clear_rnc(self) -> None:
        self.tree.clear_rnc()
        self._deltas.clear()

    def weighted_delta(self, path: tuple[str, ...], rule: GeneralizationRule) -> float:
        """Memoized weighted enlargement for admitting ``path``.

        Safe to cache because the rule is pinned for the cluster's lifetime
        and every price-moving mutation of the state empties the cache.
        """
        cached = self._deltas.get(path)
        if cached is None:
            if self._volatile is None:
                self._volatile = rule.loss_metric is LossMetric.PRL
            cached = (
                self.hypothetical_raw(path, rule) - self.current_raw(rule)
            ) * rule.weight
            self._deltas[path] = cached
        return cached

    def current_raw(self, rule: GeneralizationRule) -> float:
        assert self.lca is not None
        return _cat_raw(
            rule.loss_metric,
            self.lca.leaf_count,
            self.tree.leaf_count_total,
            self.lca.rnc,
            self.tree.total_requests,
            rule.universe_size,
        )

    def hypothetical_raw(self, path: tuple[str, ...], rule: GeneralizationRule) -> float:
        """Metric after admitting ``path``, computed without mutating the tree."""
        assert self.lca is not None
        tree = self.tree
        if not tree.path_is_settled(path):
            # admitting the path would re-home a provisional component, which
            # invalidates the incremental quantities below; price literally
            probe = tree.clone()
            end = probe.insert_path(path)
            lca = probe.lowest_common_ancestor([*self.labels, path[0]])
            return _cat_raw(
                rule.loss_metric,
                lca.leaf_count,
                probe.leaf_count_total,
                lca.rnc,
                probe.total_requests,
                rule.universe_size,
            )
        leaves_total = tree.leaf_count_total
        rnc_total = tree.total_requests
        node = tree._nodes.get(path[0])
        if node is not None:
            new_lca = _lca2(self.lca, node)
            card = new_lca.leaf_count
            rnc = new_lca.rnc + 1
            total = leaves_total
        else:
            junction = None
            for label in path[1:]:
                junction = tree._nodes.get(label)
                if junction is not None:
                    break
            if junction is None:
                # disjoint branch: everything ends up under the joiner root
                total = leaves_total + 1
                card = total
                rnc = rnc_total + 1
            else:
                grow = 0 if junction.is_leaf else 1
                total = leaves_total + grow
                new_lca = _lca2(self.lca, junction)
                card = new_lca.leaf_count + grow
                rnc = new_lca.rnc + 1
        return _cat_raw(rule.loss_metric, card, total, rnc, rnc_total + 1, rule.universe_size)


# ---------------------------------------------------------------------------
# Clusters


class Cluster:
    """An open group of buffered tuples sharing one generalization."""

    __slots__ = (
        "seq",
        "cluster_id",
        "created_at_index",
        "ruleset",
        "members",
        "subjects",
        "numeric_env",
        "cat",
        "member_paths",
        "insert_times",
        "_row",
    )

    def __init__(self, seq: int, cluster_id: str, created_at_index: int, ruleset: RuleSet):
        self.seq = seq
        self.cluster_id = cluster_id
        self.created_at_index = created_at_index
        self.ruleset = ruleset
        self.members: list[DataTuple] = []
        self.subjects: dict = {}
        self.numeric_env: dict[int, list[float]] = {}
        self.cat: dict[int, _CatState] = {}
        self.member_paths: dict = {}
        self.insert_times: dict = {}
        self._row = -1

    @property
    def rules_snapshot(self) -> tuple[GeneralizationRule, ...]:
        return self.ruleset.rules

    @property
    def distinct_subjects(self) -> int:
        return len(self.subjects)

    def add_member(
        self,
        t: DataTuple,
        paths: dict[int, tuple[str, ...]],
        insert_time: float,
    ) -> None:
        self.members.append(t)
        self.subjects[t.subject_key] = self.subjects.get(t.subject_key, 0) + 1
        self.member_paths[t.message_id] = paths
        self.insert_times[t.message_id] = insert_time
        for idx in self.ruleset.numeric_qi:
            v = t.attributes[idx].value  # type: ignore[union-attr]
            env = self.numeric_env.get(idx)
            if env is None:
                self.numeric_env[idx] = [v, v]
            else:
                if v < env[0]:
                    env[0] = v
                if v > env[1]:
                    env[1] = v
        for idx in self.ruleset.categorical_qi:
            self.cat[idx].insert(paths[idx])

    def distinct_sensitive(self, idx: int) -> int:
        return len({_value_key(m.attributes[idx]) for m in self.members})

    def total_loss(self, domains: dict[int, NumericDomain]) -> float:
        rs = self.ruleset
        if rs.n_qi == 0:
            return 0.0
        acc = 0.0
        for idx in rs.numeric_qi:
            env = self.numeric_env[idx]
            dom = domains[idx]
            width = dom.width
            raw = 0.0 if width == 0.0 else (env[1] - env[0]) / width
            acc += raw * rs.by_index[idx].weight
        for idx in rs.categorical_qi:
            acc += self.cat[idx].current_raw(rs.by_index[idx]) * rs.by_index[idx].weight
        for idx in rs.suppress_qi:
            acc += rs.by_index[idx].weight
        return acc / rs.n_qi

    def price_candidate(
        self,
        t: DataTuple,
        paths: dict[int, tuple[str, ...]],
        domains: dict[int, NumericDomain],
    ) -> float:
        """Enlargement if ``t`` joined, computed without mutation."""
        rs = self.ruleset
        if rs.n_qi == 0:
            return 0.0
        delta = 0.0
        for idx in rs.numeric_qi:
            v = t.attributes[idx].value  # type: ignore[union-attr]
            env = self.numeric_env[idx]
            dom = domains[idx]
            lo = dom.lower if dom.lower < v else v
            hi = dom.upper if dom.upper > v else v
            width = hi - lo
            if width == 0.0:
                continue
            new_lo = env[0] if env[0] < v else v
            new_hi = env[1] if env[1] > v else v
            delta += ((new_hi - new_lo) - (env[1] - env[0])) / width * rs.by_index[idx].weight
        for idx in rs.categorical_qi:
            delta += self.cat[idx].weighted_delta(paths[idx], rs.by_index[idx])
        return max(0.0, delta / rs.n_qi)

    def clone(self, seq: int, cluster_id: str) -> "Cluster":
        twin = Cluster(seq, cluster_id, self.created_at_index, self.ruleset)
        twin.members = list(self.members)
        twin.subjects = dict(self.subjects)
        twin.numeric_env = {i: list(env) for i, env in self.numeric_env.items()}
        for idx, state in self.cat.items():
            new_state = _CatState(state.tree.clone())
            if state.lca is not None:
                new_state.lca = new_state.tree.node_by_label(state.lca.label)
            new_state.labels = list(state.labels)
            twin.cat[idx] = new_state
        twin.member_paths = dict(self.member_paths)
        twin.insert_times = dict(self.insert_times)
        return twin

    def absorb(self, other: "Cluster", resolver=None) -> None:
        """Union the other cluster's members into this one.

        The other cluster may live under a different rule snapshot, so its
        members are re-read against this cluster's snapshot; ``resolver``
        supplies hierarchy paths for attributes the other side never tracked.
        """
        for t in other.members:
            self.members.append(t)
            self.subjects[t.subject_key] = self.subjects.get(t.subject_key, 0) + 1
            self.insert_times[t.message_id] = other.insert_times.get(t.message_id, 0.0)
            for idx in self.ruleset.numeric_qi:
                v = t.attributes[idx].value  # type: ignore[union-attr]
                env = self.numeric_env.get(idx)
                if env is None:
                    self.numeric_env[idx] = [v, v]
                else:
                    if v < env[0]:
                        env[0] = v
                    if v > env[1]:
                        env[1] = v
            paths = dict(other.member_paths.get(t.message_id, {}))
            for idx in self.ruleset.categorical_qi:
                if idx not in paths:
                    if resolver is None:
                        raise InvariantError(
                            f"cannot absorb member {t.message_id!r}: no hierarchy "
                            f"path for attribute {idx}"
                        )
                    paths[idx] = resolver(idx, t.attributes[idx])
                self.cat[idx].insert(paths[idx])
            self.member_paths[t.message_id] = paths


# ---------------------------------------------------------------------------
# Timers


@dataclass
class TimerStats:
    total_seconds: float = 0.0
    count: int = 0

    @property
    def mean_seconds(self) -> float:
        return self.total_seconds / self.count if self.count else 0.0


@dataclass
class EngineTimers:
    best_selection: TimerStats = field(default_factory=TimerStats)
    delay_constraint: TimerStats = field(default_factory=TimerStats)
    wait: TimerStats = field(default_factory=TimerStats)


@dataclass(frozen=True)
class Decision:
    """Outcome of best_selection: join ``cluster`` or open a new one."""

    create_new: bool
    cluster: Cluster | None
    enlargement: float


# ---------------------------------------------------------------------------
# Engine


class AnonymizationEngine:
    """Single-partition streaming anonymizer.

    Feed strictly increasing ``arrival_index`` values; the pipeline layer
    does this per partition.  ``ingest`` returns whatever tuples the step
    released; ``flush`` drains the buffer at end of stream.
    """

    def __init__(
        self,
        config: EngineConfig,
        rules: Sequence[GeneralizationRule] | None = None,
        *,
        cluster_id_prefix: str = "",
        vectorized: bool = True,
    ) -> None:
        self.config = validate_config(config)
        self.timers = EngineTimers()
        self._prefix = cluster_id_prefix
        self._vectorized = vectorized
        self._ruleset: RuleSet | None = None
        self._domains: dict[int, NumericDomain] = {}
        self._knowledge: dict[int, DGH] = {}
        self._open: list[Cluster] = []
        self._buffered: dict[int, Cluster] = {}
        self._arity: int | None = None
        self._last_arrival: int | None = None
        self._ingest_count = 0
        self._next_seq = 0
        self._released_loss_sum = 0.0
        self._released_clusters = 0
        # numeric fast-path matrices, rebuilt lazily
        self._mat_dirty = True
        self._mat_lo: np.ndarray | None = None
        self._mat_hi: np.ndarray | None = None
        self._mat_weights: np.ndarray | None = None
        self._mat_nan = False
        self._scratch: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
        # per-attribute domain bounds, invalidated when any domain moves
        self._dom_vals: tuple[np.ndarray, np.ndarray] | None = None
        if rules is not None:
            self.apply_rules(rules)

    # -- inspection ----------------------------------------------------------

    @property
    def rules(self) -> tuple[GeneralizationRule, ...] | None:
        return self._ruleset.rules if self._ruleset else None

    @property
    def open_clusters(self) -> tuple[Cluster, ...]:
        return tuple(self._open)

    @property
    def buffered_count(self) -> int:
        return len(self._buffered)

    @property
    def buffered_indices(self) -> tuple[int, ...]:
        return tuple(self._buffered)

    @property
    def ingest_count(self) -> int:
        return self._ingest_count

    @property
    def tau_effective(self) -> float:
        if self.config.tau is not None:
            return self.config.tau
        if self._released_clusters == 0:
            return math.inf
        return self._released_loss_sum / self._released_clusters

    def domain_of(self, index: int) -> NumericDomain | None:
        return self._domains.get(index)

    def knowledge_tree(self, index: int) -> DGH | None:
        return self._knowledge.get(index)

    # -- rules ----------------------------------------------------------------

    def apply_rules(self, rules: Sequence[GeneralizationRule]) -> None:
        """Install a rule set; open clusters keep their creation snapshot.

        Knowledge trees and domains persist across updates so clusters under
        older snapshots stay computable; dropping a rule's fixed bounds turns
        them into the seed of the observed domain rather than discarding the
        denominator mid-run.
        """
        ruleset = RuleSet(rules)
        if self._arity is not None:
            for rule in ruleset.rules:
                if rule.attribute_index >= self._arity:
                    raise InvariantError(
                        f"rule targets attribute {rule.attribute_index} but the "
                        f"stream carries {self._arity} attributes"
                    )
        # stage everything fallible first so a rejected document leaves the
        # engine exactly as it was
        staged_domains: dict[int, NumericDomain] = {}
        for idx in ruleset.numeric_qi:
            rule = ruleset.by_index[idx]
            current = self._domains.get(idx)
            if rule.domain is not None:
                if current is None or current.observed or (current.lower, current.upper) != rule.domain:
                    staged_domains[idx] = NumericDomain(rule.domain[0], rule.domain[1], observed=False)
            elif current is not None and not current.observed:
                staged_domains[idx] = NumericDomain(current.lower, current.upper, observed=True)
        staged_trees: dict[int, DGH] = {}
        for idx in ruleset.categorical_qi:
            rule = ruleset.by_index[idx]
            if not rule.hierarchy_paths and idx in self._knowledge:
                continue
            tree = self._knowledge.get(idx)
            grown = tree.clone() if tree is not None else DGH()
            for path in rule.hierarchy_paths:
                grown.insert_path(path, record=False)
            staged_trees[idx] = grown

        self._ruleset = ruleset
        self._domains.update(staged_domains)
        self._knowledge.update(staged_trees)
        self._mat_dirty = True
        self._dom_vals = None

    # -- value plumbing --------------------------------------------------------

    def _resolve_path(self, idx: int, value: AttributeValue) -> tuple[str, ...]:
        if isinstance(value, CategoricalWithPath):
            return value.path
        if isinstance(value, Categorical):
            tree = self._knowledge.get(idx)
            if tree is not None and value.label in tree:
                chain = tree.path_to_root(value.label)
                if chain and chain[-1] == SYNTHETIC_ROOT:
                    chain = chain[:-1]
                return chain
            return (value.label,)
        raise InvariantError(
            f"attribute {idx}: expected a categorical value, got {value!r}"
        )

    def _validate_tuple(self, t: DataTuple) -> dict[int, tuple[str, ...]]:
        """Type/domain/ancestry checks plus path resolution, no mutation."""
        assert self._ruleset is not None
        rs = self._ruleset
        if self._arity is None:
            for rule in rs.rules:
                if rule.attribute_index >= len(t.attributes):
                    raise InvariantError(
                        f"rule targets attribute {rule.attribute_index} but the "
                        f"stream carries {len(t.attributes)} attributes"
                    )
            self._arity = len(t.attributes)
        elif len(t.attributes) != self._arity:
            raise InvariantError(
                f"tuple {t.message_id!r} carries {len(t.attributes)} attributes, "
                f"stream arity is {self._arity}"
            )
        if self._last_arrival is not None and t.arrival_index <= self._last_arrival:
            raise InvariantError(
                f"arrival_index {t.arrival_index} does not increase past {self._last_arrival}"
            )
        for idx in rs.numeric_qi:
            value = t.attributes[idx]
            if not isinstance(value, Numeric):
                raise InvariantError(f"attribute {idx}: expected a numeric value, got {value!r}")
            dom = self._domains.get(idx)
            if dom is not None and not dom.observed and not dom.contains(value.value, value.value):
                from anonstream.loss import DomainViolation

                raise DomainViolation(
                    f"attribute {idx}: value {value.value} outside fixed domain "
                    f"[{dom.lower}, {dom.upper}]"
                )
        paths: dict[int, tuple[str, ...]] = {}
        for idx in rs.categorical_qi:
            path = self._resolve_path(idx, t.attributes[idx])
            self._knowledge[idx].verify_path(path)
            paths[idx] = path
        return paths

    # -- placement -------------------------------------------------------------

    def _rebuild_matrix(self) -> None:
        assert self._ruleset is not None
        idxs = self._ruleset.numeric_qi
        nan = math.nan
        lo_rows: list[list[float]] = []
        hi_rows: list[list[float]] = []
        for row, cluster in enumerate(self._open):
            cluster._row = row
            env = cluster.numeric_env
            lo_row: list[float] = []
            hi_row: list[float] = []
            for idx in idxs:
                pair = env.get(idx)
                if pair is None:  # cluster snapshot lacks this attribute
                    lo_row.append(nan)
                    hi_row.append(nan)
                else:
                    lo_row.append(pair[0])
                    hi_row.append(pair[1])
            lo_rows.append(lo_row)
            hi_rows.append(hi_row)
        shape = (len(self._open), len(idxs))
        self._mat_lo = np.array(lo_rows).reshape(shape)
        self._mat_hi = np.array(hi_rows).reshape(shape)
        self._mat_weights = np.array([self._ruleset.by_index[i].weight for i in idxs])
        self._mat_nan = bool(np.isnan(self._mat_lo).any())
        self._mat_dirty = False

    def _fast_path_usable(self) -> bool:
        if not self._vectorized or not self._open:
            return False
        rs = self._ruleset
        return all(c.ruleset is rs for c in self._open)

    def _numeric_deltas(self, t: DataTuple) -> np.ndarray | None:
        """Vector of per-cluster numeric weighted-loss growth, or None."""
        assert self._ruleset is not None
        idxs = self._ruleset.numeric_qi
        if not idxs:
            return np.zeros(len(self._open))
        if self._mat_dirty:
            self._rebuild_matrix()
        n = len(idxs)
        v = np.fromiter((t.attributes[i].value for i in idxs), dtype=float, count=n)  # type: ignore[union-attr]
        if self._dom_vals is None:
            self._dom_vals = (
                np.fromiter((self._domains[i].lower for i in idxs), dtype=float, count=n),
                np.fromiter((self._domains[i].upper for i in idxs), dtype=float, count=n),
            )
        base_lo, base_hi = self._dom_vals
        dom_lo = np.minimum(base_lo, v)
        dom_hi = np.maximum(base_hi, v)
        width = dom_hi - dom_lo
        zero = width == 0.0
        safe = np.where(zero, 1.0, width)
        lo, hi = self._mat_lo, self._mat_hi
        scratch = self._scratch
        if scratch is None or scratch[0].shape != lo.shape:
            scratch = (np.empty_like(lo), np.empty_like(lo), np.empty_like(lo))
            self._scratch = scratch
        s1, s2, s3 = scratch
        np.minimum(lo, v, out=s1)
        np.maximum(hi, v, out=s2)
        np.subtract(s2, s1, out=s2)
        np.subtract(hi, lo, out=s3)
        np.subtract(s2, s3, out=s2)
        np.divide(s2, safe, out=s2)
        np.copyto(s2, 0.0, where=zero)
        np.multiply(s2, self._mat_weights, out=s2)
        if self._mat_nan:
            return np.nansum(s2, axis=1)
        return s2.sum(axis=1)

    def best_selection(self, t: DataTuple, paths: dict[int, tuple[str, ...]] | None = None) -> Decision:
        """Pick the cheapest open cluster or decide to open a new one.

        Ties break toward the earliest created cluster, then the lowest
        cluster sequence number.  Raises NoRules without an installed set.
        """
        if self._ruleset is None:
            raise NoRules("install a rule set before ingesting")
        if paths is None:
            paths = {
                idx: self._resolve_path(idx, t.attributes[idx])
                for idx in self._ruleset.categorical_qi
            }
        if not self._open:
            return Decision(True, None, 0.0)

        rs = self._ruleset
        best: Cluster | None = None
        best_delta = math.inf
        if self._fast_path_usable() and rs.n_qi:
            numeric = self._numeric_deltas(t).tolist()
            cat_args = [(idx, rs.by_index[idx], paths[idx]) for idx in rs.categorical_qi]
            n_qi = rs.n_qi
            for cluster, delta in zip(self._open, numeric):
                cat = cluster.cat
                for idx, rule, path in cat_args:
                    state = cat[idx]
                    hit = state._deltas.get(path)
                    delta += state.weighted_delta(path, rule) if hit is None else hit
                delta /= n_qi
                if delta <= 0.0:
                    delta = 0.0
                if delta < best_delta or (
                    delta == best_delta
                    and best is not None
                    and (cluster.created_at_index, cluster.seq) < (best.created_at_index, best.seq)
                ):
                    best = cluster
                    best_delta = delta
        else:
            for cluster in self._open:
                delta = cluster.price_candidate(t, paths, self._domains)
                if delta < best_delta or (
                    delta == best_delta
                    and best is not None
                    and (cluster.created_at_index, cluster.seq) < (best.created_at_index, best.seq)
                ):
                    best = cluster
                    best_delta = delta

        assert best is not None
        if best_delta <= self.tau_effective:
            return Decision(False, best, best_delta)
        if len(self._open) < self.config.beta:
            return Decision(True, None, best_delta)
        return Decision(False, best, best_delta)

    def _new_cluster(self, created_at: int) -> Cluster:
        assert self._ruleset is not None
        seq = self._next_seq
        self._next_seq += 1
        cluster = Cluster(seq, f"{self._prefix}c{seq}", created_at, self._ruleset)
        for idx in self._ruleset.categorical_qi:
            cluster.cat[idx] = _CatState(self._knowledge[idx].clone())
        self._open.append(cluster)
        self._mat_dirty = True
        return cluster

    # -- ingestion ---------------------------------------------------------------

    def ingest(self, t: DataTuple) -> list[ReleasedTuple]:
        """Process one tuple; returns everything this step released."""
        if self._ruleset is None:
            raise NoRules("install a rule set before ingesting")
        paths = self._validate_tuple(t)

        # (1) stream knowledge: observed domains and global hierarchy trees
        for idx in self._ruleset.numeric_qi:
            v = t.attributes[idx].value  # type: ignore[union-attr]
            dom = self._domains.get(idx)
            if dom is None:
                self._domains[idx] = NumericDomain(v, v, observed=True)
                self._dom_vals = None
            elif dom.observed and (v < dom.lower or v > dom.upper):
                dom.expand(v)
                self._dom_vals = None
        for idx, path in paths.items():
            self._knowledge[idx].insert_path(path)

        # (2) placement
        t0 = time.perf_counter()
        decision = self.best_selection(t, paths)
        if decision.create_new:
            cluster = self._new_cluster(t.arrival_index)
        else:
            cluster = decision.cluster
            assert cluster is not None
        now = time.perf_counter()
        cluster.add_member(t, paths, now)
        if not self._mat_dirty and cluster._row >= 0 and self._mat_lo is not None:
            idxs = self._ruleset.numeric_qi
            if idxs:
                row = cluster._row
                for col, idx in enumerate(idxs):
                    env = cluster.numeric_env.get(idx)
                    if env is not None:
                        self._mat_lo[row, col] = env[0]
                        self._mat_hi[row, col] = env[1]
        self.timers.best_selection.total_seconds += now - t0
        self.timers.best_selection.count += 1

        self._buffered[t.arrival_index] = cluster
        self._last_arrival = t.arrival_index
        self._ingest_count += 1

        # (3) delay constraint on every expiring tuple
        released: list[ReleasedTuple] = []
        egress_index = t.arrival_index + 1
        while self._buffered:
            oldest = next(iter(self._buffered))
            if t.arrival_index - oldest < self.config.delta - 1:
                break
            expiring = self._buffered[oldest]
            released.extend(self._timed_delay_constraint(expiring, egress_index))

        # (4) request-count window tick
        period = self.config.rnc_clear_period
        if period is not None and self._ingest_count % period == 0:
            for tree in self._knowledge.values():
                tree.clear_rnc()
            for cluster in self._open:
                for state in cluster.cat.values():
                    state.clear_rnc()

        return released

    def flush(self) -> list[ReleasedTuple]:
        """Release every buffered tuple, oldest cluster first."""
        released: list[ReleasedTuple] = []
        egress_index = (self._last_arrival + 1) if self._last_arrival is not None else 0
        while self._buffered:
            oldest = next(iter(self._buffered))
            released.extend(
                self._timed_delay_constraint(self._buffered[oldest], egress_index)
            )
        return released

    # -- release machinery ---------------------------------------------------------

    def _timed_delay_constraint(self, cluster: Cluster, egress_index: int) -> list[ReleasedTuple]:
        t0 = time.perf_counter()
        out = self.delay_constraint(cluster, egress_index)
        self.timers.delay_constraint.total_seconds += time.perf_counter() - t0
        self.timers.delay_constraint.count += 1
        return out

    def _qualifies(self, cluster: Cluster) -> bool:
        assert self._ruleset is not None
        if cluster.distinct_subjects < self.config.k:
            return False
        if self.config.l > 1:
            arity = self._arity or 0
            for idx in self._ruleset.sensitive:
                if idx < arity and cluster.distinct_sensitive(idx) < self.config.l:
                    return False
        return True

    def _union_feasible(self, cluster: Cluster, partners: list[Cluster]) -> bool:
        assert self._ruleset is not None
        subjects = set(cluster.subjects)
        for p in partners:
            subjects.update(p.subjects)
        if len(subjects) < self.config.k:
            return False
        if self.config.l > 1:
            arity = self._arity or 0
            everyone = [cluster] + partners
            for idx in self._ruleset.sensitive:
                if idx >= arity:
                    continue
                values = set()
                for c in everyone:
                    for m in c.members:
                        values.add(_value_key(m.attributes[idx]))
                if len(values) < self.config.l:
                    return False
        return True

    def delay_constraint(self, cluster: Cluster, egress_index: int | None = None) -> list[ReleasedTuple]:
        """Release the cluster holding the expiring tuple.

        Qualified clusters release whole, splitting first at 2k subjects.
        Deficient clusters iteratively absorb the open cluster whose merge
        costs least until k and l hold; with no feasible partners the
        cluster releases suppressed.
        """
        if egress_index is None:
            egress_index = (self._last_arrival + 1) if self._last_arrival is not None else 0

        if self._qualifies(cluster):
            if cluster.distinct_subjects >= 2 * self.config.k:
                groups = self.split_cluster(cluster)
                expiring = groups[0]
                if self._qualifies(expiring):
                    pos = self._open.index(cluster)
                    self._open[pos : pos + 1] = groups
                    for g in groups:
                        for m in g.members:
                            self._buffered[m.arrival_index] = g
                    self._mat_dirty = True
                    return self._release(expiring, suppressed=False, egress_index=egress_index)
                # the split side would break l-diversity; release everything
            return self._release(cluster, suppressed=False, egress_index=egress_index)

        partners = [c for c in self._open if c is not cluster]
        if partners and self._union_feasible(cluster, partners):
            while not self._qualifies(cluster):
                base = cluster.total_loss(self._domains)
                best: Cluster | None = None
                best_delta = math.inf
                for p in partners:
                    trial = cluster.clone(-1, "trial")
                    trial.absorb(p, self._resolve_path)
                    delta = trial.total_loss(self._domains) - base
                    if delta < best_delta or (
                        delta == best_delta
                        and best is not None
                        and (p.created_at_index, p.seq) < (best.created_at_index, best.seq)
                    ):
                        best = p
                        best_delta = delta
                assert best is not None
                cluster.absorb(best, self._resolve_path)
                for m in best.members:
                    self._buffered[m.arrival_index] = cluster
                partners.remove(best)
                self._open.remove(best)
                self._mat_dirty = True
            return self._release(cluster, suppressed=False, egress_index=egress_index)

        return self._release(cluster, suppressed=True, egress_index=egress_index)

    def split_cluster(self, cluster: Cluster) -> list[Cluster]:
        """Split a >=2k cluster into sub-clusters of >=k distinct subjects.

        The expiring (oldest) tuple seeds the first group; each group
        greedily pulls the cheapest tuple of a subject it lacks until it
        holds k subjects.  Seeding repeats while k distinct subjects remain
        unassigned and the beta cap leaves room; leftovers join the group
        they enlarge least.  Sub-cluster hierarchies are rebuilt from the
        current knowledge trees plus member paths.

        Candidate pricing is column-vectorized over the member pool; picks
        keep the scalar scan's first-minimum tie-breaking in member order.
        """
        assert self._ruleset is not None
        k = self.config.k
        if cluster.distinct_subjects < 2 * k:
            raise InvariantError("split requires at least 2k distinct subjects")
        max_groups = self.config.beta - len(self._open) + 2

        rs = cluster.ruleset
        members = cluster.members
        n = len(members)
        num_idxs = rs.numeric_qi
        a = len(num_idxs)

        vals = np.empty((n, a))
        for row, t in enumerate(members):
            for col, idx in enumerate(num_idxs):
                vals[row, col] = t.attributes[idx].value  # type: ignore[union-attr]
        dom_lo = np.array([self._domains[i].lower for i in num_idxs])
        dom_hi = np.array([self._domains[i].upper for i in num_idxs])
        # per-candidate denominators: the domain stretched to include the value
        width = np.maximum(dom_hi, vals) - np.minimum(dom_lo, vals)
        zero_w = width == 0.0
        safe = np.where(zero_w, 1.0, width)
        weights = np.array([rs.by_index[i].weight for i in num_idxs])

        cat_cols: list[tuple[int, GeneralizationRule, list, np.ndarray]] = []
        for idx in rs.categorical_qi:
            codebook: dict[tuple[str, ...], int] = {}
            codes = np.empty(n, dtype=np.intp)
            for row, t in enumerate(members):
                path = cluster.member_paths[t.message_id][idx]
                codes[row] = codebook.setdefault(path, len(codebook))
            cat_cols.append((idx, rs.by_index[idx], list(codebook), codes))

        # per-state admission-price tables over the distinct member paths;
        # a table stays valid exactly while the state's memo dict survives,
        # because inserts empty that dict whenever prices move
        tables: dict[_CatState, np.ndarray] = {}

        def cat_table(state: _CatState, rule: GeneralizationRule, paths: list) -> np.ndarray:
            table = tables.get(state)
            if table is not None and len(state._deltas) >= len(paths):
                return table
            table = np.fromiter(
                (state.weighted_delta(p, rule) for p in paths), dtype=float, count=len(paths)
            )
            tables[state] = table
            return table

        def price_rows(group: Cluster, rows: np.ndarray | None = None) -> np.ndarray:
            """price_candidate for the given member rows, as one vector."""
            m = n if rows is None else len(rows)
            if rs.n_qi == 0:
                return np.zeros(m)
            v = vals if rows is None else vals[rows]
            w = safe if rows is None else safe[rows]
            zw = zero_w if rows is None else zero_w[rows]
            env = group.numeric_env
            env_lo = np.fromiter((env[i][0] for i in num_idxs), dtype=float, count=a)
            env_hi = np.fromiter((env[i][1] for i in num_idxs), dtype=float, count=a)
            grow = ((np.maximum(env_hi, v) - np.minimum(env_lo, v)) - (env_hi - env_lo)) / w
            np.copyto(grow, 0.0, where=zw)
            total = (grow * weights).sum(axis=1)
            for idx, rule, paths, codes in cat_cols:
                table = cat_table(group.cat[idx], rule, paths)
                total += table[codes] if rows is None else table[codes[rows]]
            return np.maximum(0.0, total / rs.n_qi)

        subjects = [t.subject_key for t in members]
        rows_of: dict = {}
        for row, s in enumerate(subjects):
            rows_of.setdefault(s, []).append(row)
        alive = np.ones(n, dtype=bool)
        alive_per_subject = {s: len(rows) for s, rows in rows_of.items()}

        def retire(row: int) -> None:
            alive[row] = False
            s = subjects[row]
            alive_per_subject[s] -= 1
            if not alive_per_subject[s]:
                del alive_per_subject[s]

        def admit(group: Cluster, row: int) -> None:
            t = members[row]
            group.add_member(
                t, cluster.member_paths[t.message_id], cluster.insert_times[t.message_id]
            )

        def make_group(seed: DataTuple) -> Cluster:
            seq = self._next_seq
            self._next_seq += 1
            g = Cluster(seq, f"{self._prefix}c{seq}", seed.arrival_index, cluster.ruleset)
            for idx in cluster.ruleset.categorical_qi:
                g.cat[idx] = _CatState(self._knowledge[idx].clone())
            g.add_member(seed, cluster.member_paths[seed.message_id], cluster.insert_times[seed.message_id])
            return g

        groups: list[Cluster] = []
        cursor = 0  # oldest still-unassigned member, in insertion order
        while len(groups) < max_groups and len(alive_per_subject) >= k:
            while not alive[cursor]:
                cursor += 1
            seed_row = cursor
            retire(seed_row)
            group = make_group(members[seed_row])
            eligible = alive.copy()
            eligible[rows_of[subjects[seed_row]]] = False
            while group.distinct_subjects < k:
                candidates = np.flatnonzero(eligible)
                # >= k distinct subjects outside the group remain by the loop
                # guards, so there is always a candidate
                assert candidates.size
                pick = int(candidates[np.argmin(price_rows(group, candidates))])
                retire(pick)
                eligible[rows_of[subjects[pick]]] = False
                admit(group, pick)
            groups.append(group)

        # each leftover is priced against every group in one vector pass;
        # group envelopes and per-path tables live in arrays refreshed for
        # just the winning group after each admit
        leftovers = np.flatnonzero(alive).tolist()
        if rs.n_qi == 0:
            # no quasi-identifiers means every price is zero and ties go to
            # the earliest group
            for row in leftovers:
                admit(groups[0], row)
            return groups

        ngroups = len(groups)
        n_qi = rs.n_qi
        keys = [(g.created_at_index, g.seq) for g in groups]

        if ngroups * max(a, 1) <= 24:
            # few groups: a plain scan beats per-row array set-up, and both
            # paths run the same operations in the same order so prices and
            # tie-breaks come out identical
            envs = [g.numeric_env for g in groups]
            cat_scalar: list[tuple[list[_CatState], GeneralizationRule, list, list, list[list[float]]]] = []
            for idx, rule, paths, codes in cat_cols:
                states = [g.cat[idx] for g in groups]
                per_group = [cat_table(s, rule, paths).tolist() for s in states]
                cat_scalar.append((states, rule, paths, codes.tolist(), per_group))
            weights_l = weights.tolist()
            vals_l = vals.tolist()
            safe_l = safe.tolist()
            zero_l = zero_w.tolist()
            cols = range(a)
            deltas = [0.0] * ngroups
            for row in leftovers:
                v = vals_l[row]
                sf = safe_l[row]
                zw = zero_l[row]
                for gi in range(ngroups):
                    env = envs[gi]
                    total = 0.0
                    for col in cols:
                        if zw[col]:
                            continue
                        lo, hi = env[num_idxs[col]]
                        x = v[col]
                        hi2 = hi if hi >= x else x
                        lo2 = lo if lo <= x else x
                        total += ((hi2 - lo2) - (hi - lo)) / sf[col] * weights_l[col]
                    for _, _, _, codes_l, per_group in cat_scalar:
                        total += per_group[gi][codes_l[row]]
                    d = total / n_qi
                    deltas[gi] = d if d > 0.0 else 0.0
                best_gi = 0
                best = deltas[0]
                for gi in range(1, ngroups):
                    if deltas[gi] < best:
                        best = deltas[gi]
                        best_gi = gi
                ties = [gi for gi in range(ngroups) if deltas[gi] == best]
                if len(ties) > 1:
                    # exact ties fall to the lowest (creation index, sequence) key
                    best_gi = min(ties, key=keys.__getitem__)
                admit(groups[best_gi], row)
                for states, rule, paths, _, per_group in cat_scalar:
                    state = states[best_gi]
                    if len(state._deltas) < len(paths):
                        per_group[best_gi] = cat_table(state, rule, paths).tolist()
            return groups

        genv_lo = np.empty((ngroups, a))
        genv_hi = np.empty((ngroups, a))

        def refresh_env(gi: int) -> None:
            env = groups[gi].numeric_env
            for col, idx in enumerate(num_idxs):
                genv_lo[gi, col], genv_hi[gi, col] = env[idx]

        for gi in range(ngroups):
            refresh_env(gi)
        # (groups x paths) delta tables plus each group's state, per attribute
        cat_plan: list[tuple[list[_CatState], GeneralizationRule, list, np.ndarray, np.ndarray]] = []
        for idx, rule, paths, codes in cat_cols:
            states = [g.cat[idx] for g in groups]
            tabs = np.empty((ngroups, len(paths)))
            for gi, state in enumerate(states):
                tabs[gi] = cat_table(state, rule, paths)
            cat_plan.append((states, rule, paths, codes, tabs))
        zero_any = bool(zero_w.any())
        for row in leftovers:
            v = vals[row]
            grow = ((np.maximum(genv_hi, v) - np.minimum(genv_lo, v)) - (genv_hi - genv_lo)) / safe[row]
            if zero_any:
                np.copyto(grow, 0.0, where=zero_w[row])
            total = (grow * weights).sum(axis=1)
            for _, _, _, codes, tabs in cat_plan:
                total += tabs[:, codes[row]]
            deltas = np.maximum(0.0, total / n_qi)
            best_gi = int(np.argmin(deltas))
            ties = np.flatnonzero(deltas == deltas[best_gi])
            if len(ties) > 1:
                # exact ties fall to the lowest (creation index, sequence) key
                best_gi = min(ties.tolist(), key=keys.__getitem__)
            admit(groups[best_gi], row)
            refresh_env(best_gi)
            for states, rule, paths, _, tabs in cat_plan:
                state = states[best_gi]
                if len(state._deltas) < len(paths):
                    tabs[best_gi] = cat_table(state, rule, paths)
        return groups

    def generalize_cluster(
        self, cluster: Cluster, *, suppressed: bool = False, egress_index: int = 0
    ) -> list[ReleasedTuple]:
        """Render every member under the cluster's uniform generalization."""
        rs = cluster.ruleset
        arity = self._arity if self._arity is not None else 0
        egress_ts = time.perf_counter()

        shared: dict[int, GeneralizedValue] = {}
        losses = [0.0] * arity
        for idx in range(arity):
            rule = rs.by_index.get(idx)
            if rule is None or (rule.kind is RuleKind.SUPPRESS and not rule.is_sensitive):
                # only quasi-identifier positions carry a loss figure
                if rule is not None and rule.is_quasi_identifier:
                    losses[idx] = 1.0
                shared[idx] = REDACTED
                continue
            if rule.is_sensitive or not rule.is_quasi_identifier:
                continue  # exact per member
            if rule.kind is RuleKind.INTERVAL:
                if suppressed:
                    dom = self._domains[idx]
                    shared[idx] = Interval(dom.lower, dom.upper)
                    losses[idx] = 1.0
                else:
                    env = cluster.numeric_env[idx]
                    dom = self._domains[idx]
                    shared[idx] = Interval(env[0], env[1])
                    losses[idx] = (
                        0.0 if dom.width == 0.0 else (env[1] - env[0]) / dom.width
                    )
            elif rule.kind is RuleKind.DGH:
                state = cluster.cat[idx]
                node = state.tree.root if suppressed else state.lca
                assert node is not None
                shared[idx] = Node(node.label, node.subtree_leaf_labels())
                losses[idx] = 1.0 if suppressed else state.current_raw(rule)

        out: list[ReleasedTuple] = []
        for member in sorted(cluster.members, key=lambda m: m.arrival_index):
            values: list[GeneralizedValue] = []
            for idx in range(arity):
                if idx in shared:
                    values.append(shared[idx])
                else:
                    values.append(Exact(member.attributes[idx]))
            out.append(
                ReleasedTuple(
                    message_id=member.message_id,
                    subject_key=member.subject_key,
                    generalized_attributes=tuple(values),
                    cluster_id=cluster.cluster_id,
                    suppressed=suppressed,
                    per_attribute_loss=tuple(losses),
                    egress_timestamp=egress_ts,
                    arrival_index=member.arrival_index,
                    egress_index=egress_index,
                    ingress_timestamp=member.ingress_timestamp,
                )
            )
        return out

    def _release(
        self, cluster: Cluster, *, suppressed: bool, egress_index: int
    ) -> list[ReleasedTuple]:
        out = self.generalize_cluster(
            cluster, suppressed=suppressed, egress_index=egress_index
        )
        release_start = time.perf_counter()
        for member in cluster.members:
            self._buffered.pop(member.arrival_index, None)
            start = cluster.insert_times.get(member.message_id)
            if start is not None:
                self.timers.wait.total_seconds += max(0.0, release_start - start)
                self.timers.wait.count += 1
        if cluster in self._open:
            self._open.remove(cluster)
        self._mat_dirty = True
        total = (
            cluster.ruleset.suppressed_total if suppressed else cluster.total_loss(self._domains)
        )
        self._released_loss_sum += total
        self._released_clusters += 1
        return out
