"""CSV replay through the pipeline, output rendering, and run reports.

The rules document carries a ``mapping`` section describing the CSV:

    {
      "subjectKeyColumn": "building_id",
      "timestampColumn": "timestamp",            // optional, see below
      "attributeColumns": ["timestamp", ...],    // column -> attribute index
      "numericColumns": ["square_feet", ...],
      "datetimeColumns": {"timestamp": "%Y-%m-%d %H:%M"},
      "pathSeparator": "|"
    }

Attribute cells parse as: datetime (seconds since the epoch, format per
``datetimeColumns``), float (``numericColumns``), else categorical — split
on ``pathSeparator`` into a leaf-first hierarchy path when the separator
occurs, a bare label otherwise.  ``timestampColumn`` names the event-time
column; replay verifies it parses and never decreases, since replay feeds
rows in file order.  Latency in seconds is measured on the in-process
monotonic clock, not on event time, and never includes network time.

The output CSV carries one row per released tuple and no wall-clock
fields, so byte-identical runs are reproducible; wall-clock statistics
live only in the report JSON.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from anonstream.core import (
    AnonStreamError,
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
    ParseError,
    Redacted,
    ReleasedTuple,
    parse_rule_document,
    validate_config,
)
from anonstream.engine import EngineTimers, TimerStats
from anonstream.pipeline import PartitionedPipeline


class SchemaError(AnonStreamError):
    """Input CSV does not match the mapping (reported with its row number)."""


# ---------------------------------------------------------------------------
# Column mapping


@dataclass(frozen=True)
class ColumnMapping:
    """How CSV columns become subject key, event time, and attributes."""

    subject_key_column: str
    attribute_columns: tuple[str, ...]
    numeric_columns: frozenset[str]
    datetime_columns: dict[str, str]
    path_separator: str
    timestamp_column: str | None


_MAPPING_KEYS = {
    "subjectKeyColumn",
    "timestampColumn",
    "attributeColumns",
    "numericColumns",
    "datetimeColumns",
    "pathSeparator",
}


def parse_mapping(obj: Any) -> ColumnMapping:
    if not isinstance(obj, dict):
        raise ParseError(f"mapping must be an object, got {obj!r}")
    extra = set(obj) - _MAPPING_KEYS
    if extra:
        raise ParseError(f"unknown mapping keys: {sorted(extra)}")
    subject = obj.get("subjectKeyColumn")
    if not isinstance(subject, str) or not subject:
        raise ParseError("mapping needs a non-empty 'subjectKeyColumn'")
    columns = obj.get("attributeColumns")
    if (
        not isinstance(columns, list)
        or not columns
        or not all(isinstance(c, str) and c for c in columns)
    ):
        raise ParseError("mapping needs 'attributeColumns', a non-empty list of names")
    if len(set(columns)) != len(columns):
        raise ParseError("attributeColumns contains duplicates")
    numeric = obj.get("numericColumns", [])
    if not isinstance(numeric, list) or not all(isinstance(c, str) for c in numeric):
        raise ParseError("numericColumns must be a list of column names")
    dt_cols = obj.get("datetimeColumns", {})
    if not isinstance(dt_cols, dict) or not all(
        isinstance(k, str) and isinstance(v, str) and v for k, v in dt_cols.items()
    ):
        raise ParseError("datetimeColumns must map column names to datetime formats")
    overlap = set(numeric) & set(dt_cols)
    if overlap:
        raise ParseError(
            f"columns cannot be both numeric and datetime: {sorted(overlap)}"
        )
    separator = obj.get("pathSeparator", "|")
    if not isinstance(separator, str) or not separator:
        raise ParseError("pathSeparator must be a non-empty string")
    timestamp = obj.get("timestampColumn")
    if timestamp is not None and (not isinstance(timestamp, str) or not timestamp):
        raise ParseError("timestampColumn must be a non-empty string when given")
    return ColumnMapping(
        subject_key_column=subject,
        attribute_columns=tuple(columns),
        numeric_columns=frozenset(numeric),
        datetime_columns=dict(dt_cols),
        path_separator=separator,
        timestamp_column=timestamp,
    )


def load_rules_document(
    path: str | Path,
) -> tuple[tuple[GeneralizationRule, ...], ColumnMapping | None]:
    """Read a rules file; returns (rules, mapping or None)."""
    path = Path(path)
    text = path.read_text()
    rules = parse_rule_document(text, base_dir=path.parent)
    doc = json.loads(text)
    mapping = None
    if isinstance(doc, dict) and "mapping" in doc:
        mapping = parse_mapping(doc["mapping"])
    return rules, mapping


# ---------------------------------------------------------------------------
# Row parsing


def _parse_epoch(raw: str, fmt: str, _memo: dict = {}) -> float:
    # naive datetimes are pinned to UTC so replays do not depend on the
    # host timezone; memoized because sensor streams repeat stamps heavily
    key = (raw, fmt)
    epoch = _memo.get(key)
    if epoch is None:
        epoch = datetime.strptime(raw, fmt).replace(tzinfo=timezone.utc).timestamp()
        if len(_memo) >= 100_000:
            _memo.clear()
        _memo[key] = epoch
    return epoch


class RowReader:
    """Turn CSV rows into stream tuples per a column mapping."""

    def __init__(self, header: Sequence[str], mapping: ColumnMapping):
        self.mapping = mapping
        positions: dict[str, int] = {}
        for pos, name in enumerate(header):
            positions.setdefault(name, pos)
        needed = [mapping.subject_key_column, *mapping.attribute_columns]
        if mapping.timestamp_column is not None:
            needed.append(mapping.timestamp_column)
        missing = [name for name in needed if name not in positions]
        if missing:
            raise SchemaError(f"input is missing mapped columns: {missing}")
        self._width = len(header)
        self._subject_pos = positions[mapping.subject_key_column]
        self._attr_pos = [positions[name] for name in mapping.attribute_columns]
        # per-column parse plan: (name, position, kind, datetime format)
        # with kind 0 = datetime, 1 = numeric, 2 = categorical
        self._plan: list[tuple[str, int, int, str | None]] = []
        for name, pos in zip(mapping.attribute_columns, self._attr_pos):
            if name in mapping.datetime_columns:
                self._plan.append((name, pos, 0, mapping.datetime_columns[name]))
            elif name in mapping.numeric_columns:
                self._plan.append((name, pos, 1, None))
            else:
                self._plan.append((name, pos, 2, None))
        # parsed values are frozen, so repeated cells can share one instance
        self._value_memo: dict[tuple, AttributeValue] = {}
        self._ts_pos = (
            positions[mapping.timestamp_column]
            if mapping.timestamp_column is not None
            else None
        )
        self._ts_fmt = (
            mapping.datetime_columns.get(mapping.timestamp_column)
            if mapping.timestamp_column is not None
            else None
        )
        self._last_event_time: float | None = None

    def read(self, row: Sequence[str], rownum: int, arrival_index: int) -> DataTuple:
        if len(row) != self._width:
            raise SchemaError(
                f"row {rownum}: expected {self._width} fields, got {len(row)}"
            )
        if self._ts_pos is not None:
            raw = row[self._ts_pos]
            try:
                if self._ts_fmt is not None:
                    event = _parse_epoch(raw, self._ts_fmt)
                else:
                    event = float(raw)
            except ValueError as exc:
                name = self.mapping.timestamp_column
                raise SchemaError(f"row {rownum}: column {name!r}: {exc}") from exc
            if self._last_event_time is not None and event < self._last_event_time:
                name = self.mapping.timestamp_column
                raise SchemaError(
                    f"row {rownum}: column {name!r} goes backwards; replay expects "
                    "the file in event-time order"
                )
            self._last_event_time = event
        memo = self._value_memo
        sep = self.mapping.path_separator
        values: list[AttributeValue] = []
        for name, pos, kind, fmt in self._plan:
            raw = row[pos]
            try:
                if kind == 1:
                    values.append(Numeric(float(raw)))
                    continue
                key = (0, fmt, raw) if kind == 0 else (2, raw)
                value = memo.get(key)
                if value is None:
                    if kind == 0:
                        value = Numeric(_parse_epoch(raw, fmt))
                    elif sep in raw:
                        value = CategoricalWithPath(tuple(raw.split(sep)))
                    else:
                        value = Categorical(raw)
                    if len(memo) >= 100_000:
                        memo.clear()
                    memo[key] = value
                values.append(value)
            except (ValueError, InvariantError) as exc:
                raise SchemaError(f"row {rownum}: column {name!r}: {exc}") from exc
        attributes = tuple(values)
        return DataTuple(
            message_id=arrival_index,
            subject_key=row[self._subject_pos],
            arrival_index=arrival_index,
            ingress_timestamp=time.perf_counter(),
            attributes=attributes,
        )


# ---------------------------------------------------------------------------
# Output rendering


def _fmt(x: float) -> str:
    return repr(float(x))


def render_value(value: GeneralizedValue) -> str:
    """One released attribute as its CSV/protocol string."""
    if isinstance(value, Interval):
        return f"[{_fmt(value.low)}..{_fmt(value.high)}]"
    if isinstance(value, Node):
        return value.label
    if isinstance(value, Redacted):
        return "*"
    if isinstance(value, Exact):
        inner = value.value
        if isinstance(inner, Numeric):
            return _fmt(inner.value)
        if isinstance(inner, CategoricalWithPath):
            return inner.leaf
        return inner.label
    raise InvariantError(f"not a generalized value: {value!r}")


def write_output_csv(
    path: str | Path,
    released: Sequence[ReleasedTuple],
    attribute_names: Sequence[str] | None = None,
) -> None:
    """One row per released tuple; no wall-clock fields, so runs compare."""
    arity = len(released[0].generalized_attributes) if released else 0
    if attribute_names is None:
        attribute_names = [f"attr{i}" for i in range(arity)]
    elif released and len(attribute_names) != arity:
        raise InvariantError(
            f"{len(attribute_names)} attribute names for arity {arity}"
        )
    header = (
        ["id", "subject", "cluster", "suppressed", "arrivalIndex", "egressIndex"]
        + list(attribute_names)
        + [f"loss:{name}" for name in attribute_names]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in released:
            writer.writerow(
                [
                    r.message_id,
                    r.subject_key,
                    r.cluster_id,
                    "true" if r.suppressed else "false",
                    r.arrival_index,
                    r.egress_index,
                ]
                + [render_value(v) for v in r.generalized_attributes]
                + [_fmt(x) for x in r.per_attribute_loss]
            )


# ---------------------------------------------------------------------------
# Reports


def _stats(values: Sequence[float]) -> dict[str, float]:
    if not values:
        return {"min": 0.0, "mean": 0.0, "median": 0.0, "p95": 0.0, "max": 0.0}
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    median = ordered[mid] if n % 2 else (ordered[mid - 1] + ordered[mid]) / 2.0
    p95 = ordered[max(0, math.ceil(0.95 * n) - 1)]  # nearest-rank
    return {
        "min": ordered[0],
        "mean": sum(ordered) / n,
        "median": median,
        "p95": p95,
        "max": ordered[-1],
    }


def _timer_dict(t: TimerStats) -> dict[str, float]:
    return {
        "totalSeconds": t.total_seconds,
        "count": t.count,
        "meanSeconds": t.mean_seconds,
    }


def merge_timers(timers: Sequence[EngineTimers]) -> EngineTimers:
    merged = EngineTimers()
    for t in timers:
        for name in ("best_selection", "delay_constraint", "wait"):
            src: TimerStats = getattr(t, name)
            dst: TimerStats = getattr(merged, name)
            dst.total_seconds += src.total_seconds
            dst.count += src.count
    return merged


@dataclass(frozen=True)
class RunReport:
    """Aggregated outcome of one run, serializable to the report JSON."""

    config: dict[str, Any]
    counts: dict[str, int]
    per_attribute_avg_loss: tuple[dict[str, Any], ...]
    mean_quasi_identifier_loss: float
    latency: dict[str, Any]
    internal_timings: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "counts": self.counts,
            "perAttributeAvgLoss": list(self.per_attribute_avg_loss),
            "meanQuasiIdentifierLoss": self.mean_quasi_identifier_loss,
            "latency": self.latency,
            "internalTimings": self.internal_timings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def compute_report(
    released: Sequence[ReleasedTuple],
    timers: EngineTimers,
    config: EngineConfig,
    *,
    rules: Sequence[GeneralizationRule] | None = None,
    partitions: int = 1,
    tuples_in: int | None = None,
) -> RunReport:
    """Aggregate released tuples into the run report.

    Per-attribute loss averages weight each released cluster once,
    regardless of its member count; suppressed clusters participate with
    their 1.0 quasi-identifier losses.
    """
    cluster_loss: dict[str, tuple[float, ...]] = {}
    suppressed_clusters: set[str] = set()
    for r in released:
        cluster_loss.setdefault(r.cluster_id, r.per_attribute_loss)
        if r.suppressed:
            suppressed_clusters.add(r.cluster_id)

    arity = len(released[0].per_attribute_loss) if released else 0
    n_clusters = len(cluster_loss)
    per_attribute: list[dict[str, Any]] = []
    for idx in range(arity):
        mean = (
            sum(losses[idx] for losses in cluster_loss.values()) / n_clusters
            if n_clusters
            else 0.0
        )
        per_attribute.append({"attributeIndex": idx, "meanLoss": mean})

    if rules is not None:
        qi_positions = [
            r.attribute_index
            for r in rules
            if r.is_quasi_identifier and r.attribute_index < arity
        ]
    else:
        qi_positions = list(range(arity))
    mean_qi = (
        sum(per_attribute[i]["meanLoss"] for i in qi_positions) / len(qi_positions)
        if qi_positions
        else 0.0
    )

    return RunReport(
        config={
            "k": config.k,
            "l": config.l,
            "delta": config.delta,
            "beta": config.beta,
            "tau": "auto" if config.tau is None else config.tau,
            "rncClearPeriod": config.rnc_clear_period,
            "partitions": partitions,
        },
        counts={
            "tuplesIn": len(released) if tuples_in is None else tuples_in,
            "tuplesOut": len(released),
            "clustersReleased": n_clusters,
            "suppressedClusters": len(suppressed_clusters),
        },
        per_attribute_avg_loss=tuple(per_attribute),
        mean_quasi_identifier_loss=mean_qi,
        latency={
            "wallSeconds": _stats(
                [r.egress_timestamp - r.ingress_timestamp for r in released]
            ),
            "arrivalIndexDistance": _stats(
                [float(r.egress_index - r.arrival_index) for r in released]
            ),
            "includesNetworkTime": False,
        },
        internal_timings={
            "bestSelection": _timer_dict(timers.best_selection),
            "delayConstraint": _timer_dict(timers.delay_constraint),
            "waitTime": _timer_dict(timers.wait),
        },
    )


# ---------------------------------------------------------------------------
# Replay


def replay(
    input_path: str | Path,
    rules_path: str | Path,
    config: EngineConfig,
    *,
    partitions: int = 1,
    output_path: str | Path | None = None,
    report_path: str | Path | None = None,
    vectorized: bool = True,
) -> RunReport:
    """Stream a CSV through the pipeline in file order, flush, write outputs.

    Deterministic for fixed inputs except the wall-clock fields of the
    report.  Raises :class:`SchemaError` with the offending row number on
    malformed rows; engine-level rejections (domain violations, hierarchy
    conflicts) propagate unchanged.
    """
    config = validate_config(config)
    rules, mapping = load_rules_document(rules_path)
    if mapping is None:
        raise ParseError("replay needs a 'mapping' section in the rules document")
    pipeline = PartitionedPipeline(
        config, rules, partition_count=partitions, vectorized=vectorized
    )
    released: list[ReleasedTuple] = []
    count = 0
    with open(input_path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is not None:
            reader = RowReader(header, mapping)
            for rownum, row in enumerate(rows, start=2):
                released.extend(pipeline.ingest_routed(reader.read(row, rownum, count)))
                count += 1
    released.extend(pipeline.flush())
    if len(released) != count:
        raise InvariantError(
            f"conservation broken: {count} tuples in, {len(released)} out"
        )
    report = compute_report(
        released,
        merge_timers([e.timers for e in pipeline.engines]),
        config,
        rules=rules,
        partitions=partitions,
        tuples_in=count,
    )
    if output_path is not None:
        write_output_csv(output_path, released, mapping.attribute_columns)
    if report_path is not None:
        Path(report_path).write_text(report.to_json())
    return report
