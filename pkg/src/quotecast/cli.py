"""``quotecast`` command line: broker, capture, monitor, prune, version."""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
import time
from urllib.parse import urlsplit

from . import __version__
from .broker import DEFAULT_MAX_OUTBOUND, serve
from .capture import BACKOFF_SECS, POLL_SECS, CaptureState, run_capture
from .clock import SystemClock
from .feed import (FaultInjectingSource, ReplaySource, SourceError,
                   SymbolSet, SyntheticSource)
from .monitor import CsvSink, TerminalSink, fan_out, run_monitor
from .prune import PruneError, RetentionPolicy, prune
from .resp import ProtocolError, connect

DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 6379
DEFAULT_SYMBOLS = "BTC=F,CL=F,ES=F,GC=F"
ENV_URL = "QUOTECAST_URL"


class UsageError(Exception):
    pass


def resolve_endpoint(host, port, environ=None) -> tuple[str, int]:
    """Flags win over ``QUOTECAST_URL``, which wins over the defaults."""
    environ = os.environ if environ is None else environ
    env_host, env_port = None, None
    url = environ.get(ENV_URL)
    if url:
        parts = urlsplit(url if "//" in url else "//" + url)
        try:
            env_host, env_port = parts.hostname, parts.port
        except ValueError as exc:
            raise UsageError(f"bad {ENV_URL}: {url}") from exc
    return (host or env_host or DEFAULT_HOST,
            port or env_port or DEFAULT_PORT)


def _endpoint_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--host", help=f"broker host (default: ${ENV_URL} or {DEFAULT_HOST})")
    p.add_argument("--port", type=int, help=f"broker port (default: ${ENV_URL} or {DEFAULT_PORT})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quotecast", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{broker,capture,monitor,prune,version}")
    sub.required = True

    p = sub.add_parser("broker", help="run the in-memory broker")
    p.add_argument("--bind", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--max-outbound", type=int, default=DEFAULT_MAX_OUTBOUND,
                   help="bytes queued for one subscriber before it is dropped")

    p = sub.add_parser("capture", help="poll quotes, store and publish them")
    _endpoint_args(p)
    p.add_argument("--symbols", default=DEFAULT_SYMBOLS)
    p.add_argument("--tell-index", type=int, default=None,
                   help="index of the symbol whose volume gates storage (default: 2)")
    p.add_argument("--source", default="synthetic", help="synthetic | replay:FILE")
    p.add_argument("--poll-secs", type=float, default=POLL_SECS)
    p.add_argument("--backoff-secs", type=float, default=BACKOFF_SECS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p-trade", type=float, default=0.9)
    p.add_argument("--max-polls", type=int, default=None)

    p = sub.add_parser("monitor", help="follow live quotes")
    _endpoint_args(p)
    p.add_argument("--symbols", default=DEFAULT_SYMBOLS)
    p.add_argument("--ndays", type=int, default=2)
    p.add_argument("--minobs", type=int, default=1500)
    p.add_argument("--export", metavar="FILE.csv")
    p.add_argument("--no-chart", action="store_true")
    p.add_argument("--ascii", action="store_true", help="plain ASCII chart")
    p.add_argument("--width", type=int, default=60)
    p.add_argument("--height", type=int, default=8)
    p.add_argument("--listen-timeout", type=float, default=1.0)
    p.add_argument("--duration", type=float, default=None, help="exit after this many seconds")

    p = sub.add_parser("prune", help="drop old points from the sorted sets")
    _endpoint_args(p)
    p.add_argument("--symbols", default=DEFAULT_SYMBOLS)
    p.add_argument("--max-age-days", type=float, default=30.0, help="0 disables the age limit")
    p.add_argument("--max-points", type=int, default=200_000, help="0 disables the count limit")
    p.add_argument("--now", type=float, default=None, help="reference epoch (default: now)")
    p.add_argument("--dry-run", action="store_true")

    sub.add_parser("version", help="print the version")
    return parser


def _shutdown_event() -> threading.Event:
    stop = threading.Event()
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop.set())
    return stop


def _make_source(spec: str, seed: int, p_trade: float):
    if spec == "synthetic":
        return SyntheticSource(seed=seed, p_trade=p_trade)
    if spec.startswith("replay:"):
        return ReplaySource.from_csv(spec[len("replay:"):])
    raise UsageError(f"unknown source {spec!r} (expected synthetic or replay:FILE)")


def cmd_broker(args) -> int:
    stop = _shutdown_event()
    serve(args.bind, args.port, stop, args.max_outbound)
    return 0


def cmd_capture(args) -> int:
    host, port = resolve_endpoint(args.host, args.port)
    symbols = SymbolSet.parse(args.symbols, args.tell_index)
    source = _make_source(args.source, args.seed, args.p_trade)
    stop = _shutdown_event()
    conn = connect(host, port)
    try:
        state = CaptureState(poll_secs=args.poll_secs, backoff_secs=args.backoff_secs)
        run_capture(conn, source, symbols, state, SystemClock(stop), stop, args.max_polls)
    finally:
        conn.close()
    print(f"polls={state.polls} stored={state.stored_batches} failures={state.failures}")
    return 0


def cmd_monitor(args) -> int:
    host, port = resolve_endpoint(args.host, args.port)
    symbols = SymbolSet.parse(args.symbols).symbols
    stop = _shutdown_event()
    sinks = []
    if not args.no_chart:
        sinks.append(TerminalSink(width=args.width, height=args.height, ascii=args.ascii))
    if args.export:
        sinks.append(CsvSink(args.export))
    if args.duration is not None:
        timer = threading.Timer(args.duration, stop.set)
        timer.daemon = True
        timer.start()
    # fail fast if the broker is not there at all
    connect(host, port).close()
    run_monitor(lambda: connect(host, port), symbols, sink=fan_out(*sinks) if sinks else None,
                clock=SystemClock(stop), shutdown=stop, ndays=args.ndays,
                minobs=args.minobs, listen_timeout=args.listen_timeout)
    return 0


def cmd_prune(args) -> int:
    host, port = resolve_endpoint(args.host, args.port)
    max_age = args.max_age_days * 86_400 if args.max_age_days else None
    try:
        policy = RetentionPolicy(max_age=max_age, max_points=args.max_points)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    now = args.now if args.now is not None else time.time()
    symbols = SymbolSet.parse(args.symbols).symbols
    with connect(host, port) as conn:
        try:
            results = prune(conn, symbols, policy, now, args.dry_run)
        except PruneError as exc:
            for symbol, n in exc.completed.items():
                print(f"{symbol} {n}")
            raise
    verb = "would remove" if args.dry_run else "removed"
    for symbol, n in results.items():
        print(f"{symbol} {verb} {n}")
    print(f"total {verb} {sum(results.values())}")
    return 0


def cmd_version(args) -> int:
    print(f"quotecast {__version__}")
    return 0


COMMANDS = {"broker": cmd_broker, "capture": cmd_capture, "monitor": cmd_monitor,
            "prune": cmd_prune, "version": cmd_version}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad input
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValueError) as exc:
        print(f"quotecast: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ProtocolError, SourceError, PruneError) as exc:
        print(f"quotecast: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 0


if __name__ == "__main__":
    sys.exit(main())
