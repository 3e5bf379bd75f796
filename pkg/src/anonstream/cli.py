"""Command line front end: ``replay`` a CSV or ``serve`` a socket stream."""

from __future__ import annotations

import argparse
import sys

from anonstream.core import AnonStreamError, EngineConfig
from anonstream.harness import load_rules_document, replay
from anonstream.server import AnonymizationServer


def _tau(text: str) -> float | None:
    if text.lower() == "auto":
        return None
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}")


def _rnc_clear(text: str) -> int | None:
    if text.lower() == "never":
        return None
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'never', got {text!r}")


def _add_engine_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--rules", required=True, help="rules document (JSON)")
    parser.add_argument("--k", type=int, required=True, help="distinct subjects per cluster")
    parser.add_argument("--l", type=int, required=True, help="distinct sensitive values per cluster")
    parser.add_argument("--delta", type=int, required=True, help="max ingestions a tuple may wait")
    parser.add_argument("--beta", type=int, required=True, help="max open clusters")
    parser.add_argument("--tau", type=_tau, default=None,
                        help="enlargement threshold, a number or 'auto' (default)")
    parser.add_argument("--partitions", type=int, default=1,
                        help="independent engine partitions (default 1)")
    parser.add_argument("--rnc-clear", type=_rnc_clear, default=None,
                        help="clear request counts every N ingestions, or 'never' (default)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anonstream",
        description="Stream anonymizer: k-anonymous, l-diverse, delay-bounded release.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    rep = commands.add_parser("replay", help="stream a CSV file and write anonymized output")
    rep.add_argument("--input", required=True, help="input CSV (schema per the rules mapping)")
    _add_engine_flags(rep)
    rep.add_argument("--output", required=True, help="released tuples CSV")
    rep.add_argument("--report", required=True, help="run report JSON")

    srv = commands.add_parser("serve", help="serve the line-delimited JSON socket protocol")
    srv.add_argument("--port", type=int, required=True, help="TCP port (0 picks a free one)")
    srv.add_argument("--host", default="127.0.0.1", help="bind address (default 127.0.0.1)")
    _add_engine_flags(srv)
    return parser


def _config(args: argparse.Namespace) -> EngineConfig:
    return EngineConfig(
        k=args.k,
        l=args.l,
        delta=args.delta,
        beta=args.beta,
        tau=args.tau,
        rnc_clear_period=args.rnc_clear,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            report = replay(
                args.input,
                args.rules,
                _config(args),
                partitions=args.partitions,
                output_path=args.output,
                report_path=args.report,
            )
            counts = report.counts
            print(
                f"released {counts['tuplesOut']} tuples in "
                f"{counts['clustersReleased']} clusters "
                f"({counts['suppressedClusters']} suppressed); "
                f"output {args.output}, report {args.report}"
            )
            return 0
        rules, _ = load_rules_document(args.rules)
        server = AnonymizationServer(
            (args.host, args.port), _config(args), rules, partitions=args.partitions
        )
        print(f"listening on {args.host}:{server.port}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.server_close()
        return 0
    except (AnonStreamError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
