"""Dynamically extensible generalization hierarchies.

A DGH is a single-rooted tree of labels.  Tuples carry leaf-first paths such
as ``("Paris", "France", "EU")``; inserting a path adds whatever nodes are
missing and bumps per-node observation counters.  Each node aggregates three
quantities over its subtree:

- ``leaf_count``    number of leaves below (or 1 for a leaf itself)
- ``coverage_count`` observations, never reset
- ``rnc``            observations in the current request window (clearable)

Labels are unique tree-wide, so ancestry is determined by labels alone and a
path that contradicts the existing tree raises :class:`HierarchyConflict`.
Paths with no label in common are joined under a reserved synthetic root
``"*"`` so that any two values always share an ancestor.
"""

from __future__ import annotations

from typing import Any, Iterable, Iterator, Sequence

from anonstream.core import AnonStreamError, CategoricalWithPath, InvariantError

SYNTHETIC_ROOT = "*"


class HierarchyConflict(AnonStreamError):
    """A path asserts an ancestry that contradicts the existing tree."""


class UnknownLeaf(AnonStreamError):
    """A label was looked up that the tree has never seen."""


class DGHNode:
    """One tree node with subtree aggregates and direct observation counts."""

    __slots__ = (
        "label",
        "parent",
        "children",
        "leaf_count",
        "coverage_count",
        "rnc",
        "direct_coverage",
        "direct_rnc",
    )

    def __init__(self, label: str, parent: "DGHNode | None") -> None:
        self.label = label
        self.parent = parent
        self.children: dict[str, DGHNode] = {}
        self.leaf_count = 1
        self.coverage_count = 0
        self.rnc = 0
        self.direct_coverage = 0
        self.direct_rnc = 0

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def depth(self) -> int:
        d = 0
        node = self
        while node.parent is not None:
            node = node.parent
            d += 1
        return d

    def walk(self) -> Iterator["DGHNode"]:
        """Yield this node and every descendant, depth-first, child order."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(list(node.children.values())))

    def subtree_leaf_labels(self) -> frozenset[str]:
        return frozenset(n.label for n in self.walk() if n.is_leaf)

    def __repr__(self) -> str:
        return (
            f"DGHNode({self.label!r}, leaves={self.leaf_count}, "
            f"coverage={self.coverage_count}, rnc={self.rnc})"
        )


def _normalize_path(
    path: Sequence[str] | CategoricalWithPath, _seen: set = set()
) -> tuple[str, ...]:
    if isinstance(path, CategoricalWithPath):
        return path.path
    out = tuple(path)
    try:  # paths repeat heavily; skip re-validating known-good tuples
        if out in _seen:
            return out
    except TypeError:
        pass
    if not out:
        raise InvariantError("hierarchy path must not be empty")
    for label in out:
        if not isinstance(label, str) or not label:
            raise InvariantError("hierarchy path labels must be non-empty strings")
    if len(set(out)) != len(out):
        raise InvariantError(f"hierarchy path labels must be pairwise distinct: {out!r}")
    if len(_seen) >= 100_000:
        _seen.clear()
    _seen.add(out)
    return out


class DGH:
    """A generalization tree that grows as the stream reveals new values."""

    __slots__ = (
        "root",
        "_nodes",
        "_leaf_labels",
        "_structure_version",
        "_settled",
        "_chains",
    )

    def __init__(self) -> None:
        self.root: DGHNode | None = None
        self._nodes: dict[str, DGHNode] = {}
        self._leaf_labels: set[str] = set()
        # bumped on any node creation or move; request counts do not count
        self._structure_version = 0
        self._settled: dict[tuple[str, ...], int] = {}
        self._chains: dict[tuple[str, ...], tuple[int, DGHNode]] = {}

    # -- read access --------------------------------------------------------

    @property
    def leaf_count_total(self) -> int:
        """M: the number of leaves the tree currently knows."""
        return self.root.leaf_count if self.root is not None else 0

    @property
    def total_requests(self) -> int:
        """RNC of the root, the denominator context of the request metric."""
        return self.root.rnc if self.root is not None else 0

    @property
    def unique_leaf_universe(self) -> frozenset[str]:
        return frozenset(self._leaf_labels)

    @property
    def structure_version(self) -> int:
        """Changes whenever a node is created or moved.

        Request-count updates do not bump it, so it identifies the facts
        that leaf counts, ancestry, and settledness derive from.
        """
        return self._structure_version

    def __contains__(self, label: str) -> bool:
        return label in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def node_by_label(self, label: str) -> DGHNode:
        try:
            return self._nodes[label]
        except KeyError:
            raise UnknownLeaf(f"label {label!r} is not in this hierarchy") from None

    def path_to_root(self, label: str) -> tuple[str, ...]:
        """Leaf-first chain of labels from ``label`` up to the root."""
        node = self.node_by_label(label)
        chain = []
        while node is not None:
            chain.append(node.label)
            node = node.parent
        return tuple(chain)

    # -- construction --------------------------------------------------------

    @classmethod
    def from_paths(
        cls, paths: Iterable[Sequence[str]], *, record: bool = False
    ) -> "DGH":
        tree = cls()
        for path in paths:
            tree.insert_path(path, record=record)
        return tree

    def clone(self) -> "DGH":
        """Structure-and-counters deep copy."""
        out = DGH()
        if self.root is None:
            return out
        mapping: dict[int, DGHNode] = {}
        for node in self.root.walk():
            parent = mapping[id(node.parent)] if node.parent is not None else None
            twin = DGHNode(node.label, parent)
            twin.leaf_count = node.leaf_count
            twin.coverage_count = node.coverage_count
            twin.rnc = node.rnc
            twin.direct_coverage = node.direct_coverage
            twin.direct_rnc = node.direct_rnc
            if parent is not None:
                parent.children[twin.label] = twin
            mapping[id(node)] = twin
            out._nodes[twin.label] = twin
        out.root = mapping[id(self.root)]
        out._leaf_labels = set(self._leaf_labels)
        return out

    # -- mutation -------------------------------------------------------------

    def _new_node(self, label: str, parent: DGHNode | None) -> DGHNode:
        self._structure_version += 1
        node = DGHNode(label, parent)
        self._nodes[label] = node
        self._leaf_labels.add(label)
        if parent is not None:
            if not parent.children:
                # parent stops being a leaf; its own unit leaves the aggregates
                self._leaf_labels.discard(parent.label)
                self._propagate_leaf_delta(parent, -1)
            parent.children[label] = node
            self._propagate_leaf_delta(parent, +1)
        return node

    def _propagate_leaf_delta(self, node: DGHNode | None, delta: int) -> None:
        while node is not None:
            node.leaf_count += delta
            node = node.parent

    def _bump_counts(self, node: DGHNode | None, coverage: int, rnc: int) -> None:
        while node is not None:
            node.coverage_count += coverage
            node.rnc += rnc
            node = node.parent

    @staticmethod
    def _is_ancestor(node: DGHNode, other: DGHNode | None) -> bool:
        walk = other
        while walk is not None:
            if walk is node:
                return True
            walk = walk.parent
        return False

    def _reparent_under(self, child: DGHNode, parent: DGHNode) -> None:
        """Move a provisionally rooted component below its revealed parent.

        Only children of the joiner root are movable; their position merely
        records that no ancestry was known yet.  Aggregates migrate with the
        subtree.
        """
        self._structure_version += 1
        old = child.parent
        assert old is not None and old.label == SYNTHETIC_ROOT
        del old.children[child.label]
        node: DGHNode | None = old
        while node is not None:
            node.leaf_count -= child.leaf_count
            node.coverage_count -= child.coverage_count
            node.rnc -= child.rnc
            node = node.parent
        if not parent.children:
            self._leaf_labels.discard(parent.label)
            self._propagate_leaf_delta(parent, -1)
        parent.children[child.label] = child
        child.parent = parent
        node = parent
        while node is not None:
            node.leaf_count += child.leaf_count
            node.coverage_count += child.coverage_count
            node.rnc += child.rnc
            node = node.parent

    def _ensure_synthetic_root(self) -> DGHNode:
        assert self.root is not None
        if self.root.label == SYNTHETIC_ROOT:
            return self.root
        self._structure_version += 1
        old_root = self.root
        star = DGHNode(SYNTHETIC_ROOT, None)
        star.leaf_count = 0
        self._nodes[SYNTHETIC_ROOT] = star
        self.root = star
        # attach the old tree below the joiner
        old_root.parent = star
        star.children[old_root.label] = old_root
        star.leaf_count = old_root.leaf_count
        star.coverage_count = old_root.coverage_count
        star.rnc = old_root.rnc
        return star

    def insert_path(
        self, path: Sequence[str] | CategoricalWithPath, *, record: bool = True
    ) -> DGHNode:
        """Insert a leaf-first path, creating missing nodes.

        With ``record=True`` (an observation) the path's end node gains one
        direct coverage/request count, propagated through its ancestors.
        ``record=False`` adds structure only, used for seed hierarchies.
        Structure insertion is idempotent; contradictions raise
        :class:`HierarchyConflict`.
        """
        leaf_first = _normalize_path(path)
        # re-inserting a path the current structure already absorbed cannot
        # change the tree, so only the end node needs looking up
        hit = self._chains.get(leaf_first)
        if hit is not None and hit[0] == self._structure_version:
            end = hit[1]
        else:
            if SYNTHETIC_ROOT in leaf_first:
                raise HierarchyConflict(
                    f"label {SYNTHETIC_ROOT!r} is reserved for the joiner root"
                )
            rooted = tuple(reversed(leaf_first))  # most general label first

            if self.root is None:
                node: DGHNode | None = None
                for label in rooted:
                    node = self._new_node(label, node)
                    if node.parent is None:
                        self.root = node
                end = node
            else:
                end = self._insert_rooted(rooted)

            assert end is not None
            self._chains[leaf_first] = (self._structure_version, end)
        if record:
            end.direct_coverage += 1
            end.direct_rnc += 1
            self._bump_counts(end, 1, 1)
        return end

    def _insert_rooted(self, rooted: tuple[str, ...]) -> DGHNode:
        known = [label in self._nodes for label in rooted]
        if not any(known):
            star = self._ensure_synthetic_root()
            node = star
            for label in rooted:
                node = self._new_node(label, node)
            return node

        anchor_pos = known.index(True)
        anchor = self._nodes[rooted[anchor_pos]]

        # labels more general than the anchor must match its ancestor chain,
        # extending the tree upward when the chain runs out of real nodes
        ancestor = anchor.parent
        lowest_known = anchor
        for pos in range(anchor_pos - 1, -1, -1):
            label = rooted[pos]
            if ancestor is None or ancestor.label == SYNTHETIC_ROOT:
                if label in self._nodes:
                    raise HierarchyConflict(
                        f"path places {lowest_known.label!r} under {label!r}, but "
                        f"{label!r} already sits elsewhere in the tree"
                    )
                self._structure_version += 1
                above = DGHNode(label, ancestor)
                self._nodes[label] = above
                if ancestor is None:
                    self.root = above
                else:
                    del ancestor.children[lowest_known.label]
                    ancestor.children[label] = above
                above.children[lowest_known.label] = lowest_known
                lowest_known.parent = above
                above.leaf_count = lowest_known.leaf_count
                above.coverage_count = lowest_known.coverage_count
                above.rnc = lowest_known.rnc
                lowest_known = above
                ancestor = above.parent
            elif ancestor.label == label:
                lowest_known = ancestor
                ancestor = ancestor.parent
            else:
                raise HierarchyConflict(
                    f"path places {lowest_known.label!r} under {label!r}, but the tree "
                    f"has it under {ancestor.label!r}"
                )

        # walk down from the anchor, creating what is missing
        node = anchor
        for pos in range(anchor_pos + 1, len(rooted)):
            label = rooted[pos]
            existing = self._nodes.get(label)
            if existing is None:
                node = self._new_node(label, node)
                continue
            if existing.parent is not node:
                movable = (
                    existing.parent is not None
                    and existing.parent.label == SYNTHETIC_ROOT
                    and not self._is_ancestor(existing, node)
                )
                if not movable:
                    parent_label = existing.parent.label if existing.parent else "<root>"
                    raise HierarchyConflict(
                        f"path places {label!r} under {node.label!r}, but the tree "
                        f"has it under {parent_label!r}"
                    )
                self._reparent_under(existing, node)
            node = existing
        return node

    def verify_path(self, path: Sequence[str] | CategoricalWithPath) -> None:
        """Raise exactly what ``insert_path`` would, without mutating.

        Lets callers validate a whole batch of paths before committing any
        of them, keeping failed operations free of side effects.
        """
        leaf_first = _normalize_path(path)
        # a chain the current structure already absorbed re-inserts cleanly
        hit = self._chains.get(leaf_first)
        if hit is not None and hit[0] == self._structure_version:
            return
        if SYNTHETIC_ROOT in leaf_first:
            raise HierarchyConflict(f"label {SYNTHETIC_ROOT!r} is reserved for the joiner root")
        if self.root is None:
            return
        rooted = tuple(reversed(leaf_first))
        known = [label in self._nodes for label in rooted]
        if not any(known):
            return

        anchor_pos = known.index(True)
        anchor = self._nodes[rooted[anchor_pos]]
        ancestor = anchor.parent
        lowest_label = anchor.label
        for pos in range(anchor_pos - 1, -1, -1):
            label = rooted[pos]
            if ancestor is None or ancestor.label == SYNTHETIC_ROOT:
                if label in self._nodes:
                    raise HierarchyConflict(
                        f"path places {lowest_label!r} under {label!r}, but "
                        f"{label!r} already sits elsewhere in the tree"
                    )
                lowest_label = label  # would become a new top node
            elif ancestor.label == label:
                lowest_label = ancestor.label
                ancestor = ancestor.parent
            else:
                raise HierarchyConflict(
                    f"path places {lowest_label!r} under {label!r}, but the tree "
                    f"has it under {ancestor.label!r}"
                )

        node: DGHNode | None = anchor
        base = anchor  # deepest real node the pending chain would hang from
        for pos in range(anchor_pos + 1, len(rooted)):
            label = rooted[pos]
            existing = self._nodes.get(label)
            if existing is None:
                node = None
                continue
            if node is not None and existing.parent is node:
                node = existing
                base = existing
                continue
            movable = (
                existing.parent is not None
                and existing.parent.label == SYNTHETIC_ROOT
                and not self._is_ancestor(existing, base)
            )
            if not movable:
                if node is None:
                    raise HierarchyConflict(
                        f"path places {label!r} under a new node, but the tree "
                        f"already has it elsewhere"
                    )
                parent_label = existing.parent.label if existing.parent else "<root>"
                raise HierarchyConflict(
                    f"path places {label!r} under {node.label!r}, but the tree "
                    f"has it under {parent_label!r}"
                )
            node = existing
            base = existing

    # -- queries -------------------------------------------------------------

    def path_is_settled(self, path: Sequence[str] | CategoricalWithPath) -> bool:
        """True when inserting the path cannot move any existing node.

        Holds when the deepest known label's ancestor chain matches the
        path's remaining labels, with only unknown labels past the chain.
        An unsettled path is still insertable; it just re-homes a
        provisionally rooted component, so callers keeping derived state
        (cached ancestors, incremental aggregates) must recompute.
        """
        leaf_first = _normalize_path(path)
        if self._settled.get(leaf_first) == self._structure_version:
            return True
        if self._settled_walk(leaf_first):
            self._settled[leaf_first] = self._structure_version
            return True
        return False

    def _settled_walk(self, leaf_first: tuple[str, ...]) -> bool:
        for i, label in enumerate(leaf_first):
            node = self._nodes.get(label)
            if node is None:
                continue
            walk = node.parent
            for upper in leaf_first[i + 1 :]:
                if walk is None or walk.label == SYNTHETIC_ROOT:
                    if upper in self._nodes:
                        return False
                    continue
                if walk.label != upper:
                    return False
                walk = walk.parent
            return True
        return True

    def lowest_common_ancestor(self, labels: Iterable[str]) -> DGHNode:
        """Deepest node whose subtree contains every given label.

        A node contains itself, so internal labels are legal inputs.  Raises
        :class:`UnknownLeaf` for labels the tree has never seen and
        :class:`InvariantError` on an empty label set.
        """
        it = iter(labels)
        try:
            first = next(it)
        except StopIteration:
            raise InvariantError("lowest_common_ancestor needs at least one label") from None
        node = self.node_by_label(first)
        depth = node.depth()
        for label in it:
            other = self.node_by_label(label)
            other_depth = other.depth()
            while other_depth > depth:
                other = other.parent  # type: ignore[assignment]
                other_depth -= 1
            while depth > other_depth:
                node = node.parent  # type: ignore[assignment]
                depth -= 1
            while node is not other:
                node = node.parent  # type: ignore[assignment]
                other = other.parent  # type: ignore[assignment]
                depth -= 1
        return node

    def clear_rnc(self) -> None:
        """Zero every request count; structure and coverage stay untouched."""
        if self.root is None:
            return
        for node in self.root.walk():
            node.rnc = 0
            node.direct_rnc = 0

    def leaves(self) -> Iterator[DGHNode]:
        if self.root is None:
            return iter(())
        return (n for n in self.root.walk() if n.is_leaf)

    def to_nested(self) -> dict[str, Any] | None:
        """Render as the nested ``{label, children}`` document shape."""
        if self.root is None:
            return None

        def build(node: DGHNode) -> dict[str, Any]:
            if node.is_leaf:
                return {"label": node.label}
            return {"label": node.label, "children": [build(c) for c in node.children.values()]}

        return build(self.root)
