"""Subject-keyed partitioning over independent engine instances.

Each subject key maps to exactly one partition for the pipeline's lifetime,
so a partition sees every tuple of the subjects it owns and none of the
others.  Because each engine enforces the full group-size and diversity
bounds on its own sub-stream, every released cluster satisfies them
globally; no cross-partition coordination is needed.

The delay and open-cluster bounds apply per partition: a partition releases
after buffering ``delta`` of *its own* tuples, so end-to-end latency scales
with partition fan-out.  The merged output preserves per-partition order
only.

The router is the 64-bit FNV-1a hash of the subject key string, modulo the
partition count.  The algorithm is pinned (not a stdlib hash) so routing
can be reproduced independently, in any language, for equivalence testing.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

from anonstream.core import (
    ConfigError,
    DataTuple,
    EngineConfig,
    GeneralizationRule,
    ReleasedTuple,
)
from anonstream.engine import AnonymizationEngine

_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a: xor each byte into the state, then multiply."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


class PartitionedPipeline:
    """Route a stream across independent engines by subject key.

    Arrival order is assigned here: each partition numbers the tuples it
    accepts densely from 0, so the caller's ``arrival_index`` is ignored
    and delay is measured in partition-local steps.  A rejected tuple does
    not consume an index.

    With ``partition_count=1`` the pipeline is exactly one engine with no
    cluster-id prefix; with more, cluster ids carry a ``p<i>:`` prefix so
    merged outputs stay attributable.
    """

    def __init__(
        self,
        config: EngineConfig,
        rules: Sequence[GeneralizationRule] | None = None,
        *,
        partition_count: int = 1,
        vectorized: bool = True,
    ) -> None:
        if partition_count < 1:
            raise ConfigError(
                f"partition_count must be at least 1, got {partition_count}"
            )
        self._engines = tuple(
            AnonymizationEngine(
                config,
                rules,
                cluster_id_prefix=f"p{i}:" if partition_count > 1 else "",
                vectorized=vectorized,
            )
            for i in range(partition_count)
        )

    @property
    def partition_count(self) -> int:
        return len(self._engines)

    @property
    def engines(self) -> tuple[AnonymizationEngine, ...]:
        return self._engines

    @property
    def ingest_count(self) -> int:
        return sum(e.ingest_count for e in self._engines)

    @property
    def buffered_count(self) -> int:
        return sum(e.buffered_count for e in self._engines)

    def route_key(self, subject_key: int | str) -> int:
        return fnv1a_64(str(subject_key).encode("utf-8")) % len(self._engines)

    def route(self, t: DataTuple) -> int:
        """Partition index that will process this tuple."""
        return self.route_key(t.subject_key)

    def ingest_routed(self, t: DataTuple) -> list[ReleasedTuple]:
        """Feed one tuple to its partition; other partitions are untouched."""
        if len(self._engines) == 1:
            engine = self._engines[0]
        else:
            engine = self._engines[self.route_key(t.subject_key)]
        if t.arrival_index != engine.ingest_count:
            t = replace(t, arrival_index=engine.ingest_count)
        return engine.ingest(t)

    def broadcast_rules(self, rules: Sequence[GeneralizationRule]) -> None:
        """Install the rule set on every partition at its current boundary.

        Each engine accepts or rejects atomically, but partitions validate
        against their own observed stream; if one rejects, the ones before
        it keep the new rules.  Re-broadcast a corrected document to
        converge.
        """
        for engine in self._engines:
            engine.apply_rules(rules)

    def flush(self) -> list[ReleasedTuple]:
        """Drain every partition, in partition order."""
        released: list[ReleasedTuple] = []
        for engine in self._engines:
            released.extend(engine.flush())
        return released
