"""Line protocol sessions and the shared-state TCP front end."""

from __future__ import annotations

import json
import socket
import threading

import pytest

from anonstream.core import EngineConfig
from anonstream.server import AnonymizationServer, StreamSession
from helpers import qi_dgh, qi_interval, sensitive_passthrough

RULES = [qi_interval(0), qi_dgh(1), sensitive_passthrough(2)]


def cfg(**kw) -> EngineConfig:
    base = dict(k=1, l=1, delta=1, beta=2)
    base.update(kw)
    return EngineConfig(**base)


def data_line(i, subject, values, **extra) -> str:
    return json.dumps({"id": i, "subject": subject, "values": values, **extra})


def parse_one(replies: list[str]) -> dict:
    assert len(replies) == 1, replies
    return json.loads(replies[0])


class TestSessionProtocol:
    def test_immediate_echo_when_thresholds_allow(self):
        session = StreamSession(cfg(), RULES)
        out = parse_one(
            session.process_line(data_line(0, "s0", [8.0, "Paris|France|EU", "flu"]))
        )
        assert out == {
            "id": 0,
            "subject": "s0",
            "cluster": "c0",
            "suppressed": False,
            "values": ["[8.0..8.0]", "Paris", "flu"],
        }

    def test_blank_lines_produce_nothing(self):
        session = StreamSession(cfg(), RULES)
        assert session.process_line("") == []
        assert session.process_line("   \n") == []

    def test_malformed_json_does_not_poison_the_stream(self):
        session = StreamSession(cfg(), RULES)
        err = parse_one(session.process_line("{nope"))
        assert "error" in err and err["id"] is None
        err = parse_one(session.process_line("[1, 2]"))
        assert "error" in err
        ok = parse_one(
            session.process_line(data_line(1, "s0", [1.0, "Nice|France|EU", "flu"]))
        )
        assert ok["cluster"] == "c0"

    def test_data_line_validation(self):
        session = StreamSession(cfg(), RULES)
        cases = [
            '{"id": 1}',
            data_line(2, True, [1.0, "x", "y"]),
            data_line(3, "s", "not-a-list"),
            data_line(4, "s", [1.0, "x", "y"], ts="noon"),
            data_line(5, "s", [1.0, "x", "y"], bogus=1),
            data_line(6, "s", [None, "x", "y"]),
        ]
        for line in cases:
            reply = parse_one(session.process_line(line))
            assert "error" in reply, line
        # the id is echoed whenever the line carried one
        assert json.loads(session.process_line(cases[5])[0])["id"] == 6

    def test_failed_lines_do_not_consume_arrival_slots(self):
        session = StreamSession(cfg(delta=50), RULES)
        session.process_line(data_line(0, "s0", [1.0, "a", "flu"]))
        session.process_line(data_line(1, "s1", [None, "b", "flu"]))  # rejected
        session.process_line(data_line(2, "s2", [2.0, "c", "flu"]))
        assert session.pipeline.ingest_count == 2

    def test_flush_releases_buffer_and_acknowledges(self):
        session = StreamSession(cfg(delta=50), RULES)
        assert session.process_line(data_line(0, "s0", [1.0, "a", "flu"])) == []
        assert session.process_line(data_line(1, "s1", [9.0, "b", "flu"])) == []
        out = session.process_line('{"control": "flush"}')
        assert len(out) == 3
        assert json.loads(out[-1]) == {"control": "flush", "released": 2}
        ids = {json.loads(line)["id"] for line in out[:-1]}
        assert ids == {0, 1}

    def test_unknown_control_is_an_error(self):
        session = StreamSession(cfg(), RULES)
        assert "error" in parse_one(session.process_line('{"control": "restart"}'))

    def test_rules_update_applies_to_later_tuples(self):
        session = StreamSession(cfg(), [qi_interval(0)])
        before = parse_one(session.process_line(data_line(0, "s0", [5.0])))
        assert before["values"] == ["[5.0..5.0]"]
        update = {
            "control": "rules",
            "rules": [{"index": 0, "kind": "suppress", "quasiIdentifier": True}],
        }
        assert session.process_line(json.dumps(update)) == []
        after = parse_one(session.process_line(data_line(1, "s0", [6.0])))
        assert after["values"] == ["*"]

    def test_bad_rules_rejected_and_old_rules_kept(self):
        session = StreamSession(cfg(), [qi_interval(0)])
        bad = {"control": "rules", "rules": [{"index": 0, "kind": "bogus"}]}
        assert "error" in parse_one(session.process_line(json.dumps(bad)))
        missing = {"control": "rules"}
        assert "error" in parse_one(session.process_line(json.dumps(missing)))
        out = parse_one(session.process_line(data_line(0, "s0", [5.0])))
        assert out["values"] == ["[5.0..5.0]"]


class _Client:
    def __init__(self, port: int) -> None:
        self.sock = socket.create_connection(("127.0.0.1", port), timeout=5)
        self.file = self.sock.makefile("rwb")

    def send(self, line: str) -> None:
        self.file.write(line.encode("utf-8") + b"\n")
        self.file.flush()

    def recv(self) -> dict:
        raw = self.file.readline()
        assert raw, "connection closed while awaiting a reply"
        return json.loads(raw)

    def close(self) -> None:
        self.file.close()
        self.sock.close()


@pytest.fixture
def serve():
    servers = []

    def start(config: EngineConfig, rules=RULES) -> AnonymizationServer:
        srv = AnonymizationServer(("127.0.0.1", 0), config, rules)
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        servers.append(srv)
        return srv

    yield start
    for srv in servers:
        srv.shutdown()
        srv.server_close()


class TestTcpServer:
    def test_roundtrip(self, serve):
        srv = serve(cfg())
        client = _Client(srv.port)
        client.send(data_line(0, "s0", [8.0, "Paris|France|EU", "flu"]))
        reply = client.recv()
        assert reply["cluster"] == "c0" and reply["values"][1] == "Paris"
        client.close()

    def test_dropped_connection_keeps_buffered_tuples(self, serve):
        srv = serve(cfg(delta=50))
        first = _Client(srv.port)
        first.send(data_line(0, "s0", [1.0, "Paris|France|EU", "flu"]))
        # same-connection lines are handled in order, so this reply proves
        # the buffered tuple was ingested before the disconnect
        first.send("{sync")
        assert "error" in first.recv()
        first.close()  # no flush on disconnect

        second = _Client(srv.port)
        second.send('{"control": "flush"}')
        released = second.recv()
        ack = second.recv()
        assert released["id"] == 0 and released["subject"] == "s0"
        assert ack == {"control": "flush", "released": 1}
        second.close()
