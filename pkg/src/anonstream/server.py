"""Line-delimited JSON socket service over a partitioned pipeline.

Protocol, one JSON object per line:

- data in:   {"id": ..., "subject": ..., "ts": 12.5, "values": [8.0, "Paris|France"]}
- rules in:  {"control": "rules", "rules": [ ...rule objects... ]}
- flush in:  {"control": "flush"}
- data out:  {"id": ..., "subject": ..., "cluster": "c0", "suppressed": false,
              "values": ["[8.0..9.0]", "France"]}
- flush out: {"control": "flush", "released": 2}
- error out: {"error": "...", "id": <offending id or null>}

Numbers become numeric attribute values; strings become categorical values,
split into a leaf-first hierarchy path when they contain the path
separator.  A ``ts`` number is used as the tuple's ingress stamp, otherwise
the server's monotonic clock is.  Rule updates answer nothing on success;
inline the hierarchies (``hierarchyFile`` is not resolvable over a socket).

All connections feed one pipeline in arrival order; a dropped connection
flushes nothing, so buffered tuples surface on later traffic, an explicit
flush line, or shutdown.  A faulty line answers an error and leaves the
stream state untouched.
"""

from __future__ import annotations

import json
import socketserver
import threading
import time
from typing import Any, Sequence

from anonstream.core import (
    AnonStreamError,
    Categorical,
    CategoricalWithPath,
    DataTuple,
    EngineConfig,
    GeneralizationRule,
    Numeric,
    ReleasedTuple,
    parse_rule_document,
)
from anonstream.harness import render_value
from anonstream.pipeline import PartitionedPipeline


def _attribute_value(v: Any):
    if isinstance(v, bool) or v is None:
        raise AnonStreamError(f"values must be numbers or strings, got {v!r}")
    if isinstance(v, (int, float)):
        return Numeric(float(v))
    if isinstance(v, str):
        if "|" in v:
            return CategoricalWithPath(tuple(v.split("|")))
        return Categorical(v)
    raise AnonStreamError(f"values must be numbers or strings, got {v!r}")


def _released_line(r: ReleasedTuple) -> str:
    return json.dumps(
        {
            "id": r.message_id,
            "subject": r.subject_key,
            "cluster": r.cluster_id,
            "suppressed": r.suppressed,
            "values": [render_value(v) for v in r.generalized_attributes],
        },
        sort_keys=True,
    )


def _error_line(message: str, message_id: Any = None) -> str:
    return json.dumps({"error": message, "id": message_id}, sort_keys=True)


class StreamSession:
    """Protocol state machine: text lines in, text lines out.

    Owns the pipeline and a lock; every connection of a server shares one
    session, giving a single serialized ingestion order.
    """

    def __init__(
        self,
        config: EngineConfig,
        rules: Sequence[GeneralizationRule] | None = None,
        *,
        partitions: int = 1,
    ) -> None:
        self.pipeline = PartitionedPipeline(config, rules, partition_count=partitions)
        self._lock = threading.Lock()
        self._counter = 0

    def process_line(self, line: str) -> list[str]:
        line = line.strip()
        if not line:
            return []
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            return [_error_line(f"not valid JSON: {exc}")]
        if not isinstance(obj, dict):
            return [_error_line(f"expected a JSON object, got {obj!r}")]
        with self._lock:
            if "control" in obj:
                return self._control(obj)
            return self._data(obj)

    def flush(self) -> list[ReleasedTuple]:
        with self._lock:
            return self.pipeline.flush()

    def _control(self, obj: dict[str, Any]) -> list[str]:
        kind = obj.get("control")
        if kind == "rules":
            if "rules" not in obj:
                return [_error_line("rules control line needs a 'rules' array")]
            try:
                rules = parse_rule_document(json.dumps(obj["rules"]))
                self.pipeline.broadcast_rules(rules)
            except AnonStreamError as exc:
                return [_error_line(str(exc))]
            return []
        if kind == "flush":
            released = self.pipeline.flush()
            out = [_released_line(r) for r in released]
            out.append(
                json.dumps({"control": "flush", "released": len(released)}, sort_keys=True)
            )
            return out
        return [_error_line(f"unknown control {kind!r}")]

    def _data(self, obj: dict[str, Any]) -> list[str]:
        message_id = obj.get("id")
        extra = set(obj) - {"id", "subject", "ts", "values"}
        if extra:
            return [_error_line(f"unknown keys {sorted(extra)}", message_id)]
        if "id" not in obj or "subject" not in obj:
            return [_error_line("data lines need 'id' and 'subject'", message_id)]
        for key in ("id", "subject"):
            v = obj[key]
            if isinstance(v, bool) or not isinstance(v, (str, int)):
                return [_error_line(f"'{key}' must be a string or integer", message_id)]
        values = obj.get("values")
        if not isinstance(values, list):
            return [_error_line("data lines need a 'values' array", message_id)]
        ts = obj.get("ts", None)
        if ts is not None and (isinstance(ts, bool) or not isinstance(ts, (int, float))):
            return [_error_line("'ts' must be a number", message_id)]
        try:
            t = DataTuple(
                message_id=message_id,
                subject_key=obj["subject"],
                arrival_index=self._counter,
                ingress_timestamp=time.perf_counter() if ts is None else float(ts),
                attributes=tuple(_attribute_value(v) for v in values),
            )
            released = self.pipeline.ingest_routed(t)
        except AnonStreamError as exc:
            return [_error_line(str(exc), message_id)]
        self._counter += 1
        return [_released_line(r) for r in released]


class AnonymizationServer(socketserver.ThreadingTCPServer):
    """TCP front end; all connections share one :class:`StreamSession`."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(
        self,
        address: tuple[str, int],
        config: EngineConfig,
        rules: Sequence[GeneralizationRule] | None = None,
        *,
        partitions: int = 1,
    ) -> None:
        super().__init__(address, _LineHandler)
        self.session = StreamSession(config, rules, partitions=partitions)

    @property
    def port(self) -> int:
        return self.server_address[1]


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        server: AnonymizationServer = self.server  # type: ignore[assignment]
        for raw in self.rfile:
            replies = server.session.process_line(raw.decode("utf-8", "replace"))
            if replies:
                self.wfile.write(("\n".join(replies) + "\n").encode("utf-8"))
                self.wfile.flush()
