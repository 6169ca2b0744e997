"""Minimal RESP2 broker: sorted sets plus pub/sub.

Only the commands the capture, monitor and prune tools need are provided.
Replies, including error texts, follow a Redis 6.2 server so that clients
can be pointed at either.

All state changes run on one asyncio event loop, which gives a single
mutation order. Publish fan-out writes to each subscriber's transport in
the loop thread, so one publisher's messages reach every subscriber in
publish order.
"""

from __future__ import annotations

import asyncio
import bisect
import logging
import math
import re
import threading
from typing import Callable, Optional

from .resp import (NEED_MORE, Decoder, ErrorReply, ProtocolError,
                   SimpleString, encode)

log = logging.getLogger(__name__)

DEFAULT_MAX_OUTBOUND = 8 * 1024 * 1024

# --------------------------------------------------------------------------
# Argument parsing, mirroring the server's strict helpers
# --------------------------------------------------------------------------

_INT_RE = re.compile(rb"-?(0|[1-9][0-9]*)\Z")
_DEC_RE = re.compile(rb"[+-]?([0-9]+\.?[0-9]*|\.[0-9]+)([eE][+-]?[0-9]+)?\Z")
_HEX_RE = re.compile(rb"[+-]?0[xX]([0-9a-fA-F]+\.?[0-9a-fA-F]*|\.[0-9a-fA-F]+)"
                     rb"([pP][+-]?[0-9]+)?\Z")
_INF_RE = re.compile(rb"[+-]?(inf|infinity)\Z", re.IGNORECASE)
_WS = b" \t\n\v\f\r"


def parse_int(raw: bytes) -> Optional[int]:
    """Signed 64-bit integer; no sign prefix, no leading zeros, no '-0'."""
    if not _INT_RE.match(raw) or raw == b"-0":
        return None
    value = int(raw)
    if not -(1 << 63) <= value < (1 << 63):
        return None
    return value


def _strtod_prefix(raw: bytes):
    """Return (value, consumed) like C strtod, or (0.0, 0) if nothing parses."""
    i = 0
    while i < len(raw) and raw[i] in _WS:
        i += 1
    body = raw[i:]
    for pattern in (_INF_RE, _HEX_RE, _DEC_RE):
        # longest matching prefix
        for end in range(len(body), 0, -1):
            chunk = body[:end]
            if pattern.match(chunk):
                return _to_float(chunk), i + end
    if body[:3].lower() == b"nan" or body[1:4].lower() == b"nan" and body[:1] in b"+-":
        return math.nan, len(raw)
    return 0.0, 0


def _to_float(token: bytes) -> float:
    if _HEX_RE.match(token):
        try:
            return float.fromhex(token.decode())
        except OverflowError:
            return -math.inf if token.startswith(b"-") else math.inf
    return float(token)


def parse_score(raw: bytes) -> Optional[float]:
    """Parse a ZADD score: a whole-token float, not NaN, not out of range."""
    if not raw or raw[0] in _WS:
        return None
    value, used = _strtod_prefix(raw)
    if used != len(raw) or math.isnan(value):
        return None
    if math.isinf(value) and not _INF_RE.match(raw):
        return None
    if value == 0.0 and _has_nonzero_digit(raw):
        return None
    return value


def _has_nonzero_digit(raw: bytes) -> bool:
    mantissa = re.split(rb"[eEpP]", raw.lstrip(b"+-"), maxsplit=1)[0]
    if mantissa[:2].lower() == b"0x":
        mantissa = mantissa[2:]
    return any(c not in b"0." for c in mantissa)


def parse_range_bound(raw: bytes):
    """Parse a ZREMRANGEBYSCORE bound. Returns (value, exclusive) or None."""
    exclusive = raw[:1] == b"("
    if exclusive:
        raw = raw[1:]
    value, used = _strtod_prefix(raw)
    if used == 0:
        # strtod consumed nothing; the server only accepts that for ""
        if raw:
            return None
    elif used != len(raw):
        return None
    if math.isnan(value):
        return None
    return value, exclusive


def format_score(value: float) -> bytes:
    if math.isinf(value):
        return b"inf" if value > 0 else b"-inf"
    return b"%.17g" % value


# --------------------------------------------------------------------------
# Sorted set
# --------------------------------------------------------------------------

def _score_of(entry):
    return entry[0]


class SortedSet:
    """Members with float scores, ordered by (score, member bytes)."""

    def __init__(self):
        self._scores: dict[bytes, float] = {}
        self._entries: list[tuple[float, bytes]] = []

    def __len__(self):
        return len(self._entries)

    def __contains__(self, member):
        return member in self._scores

    def score(self, member: bytes) -> Optional[float]:
        return self._scores.get(member)

    def add(self, score: float, member: bytes) -> int:
        """Insert or rescore ``member``. Returns 1 if it was new."""
        old = self._scores.get(member)
        if old is not None:
            if old == score:
                return 0
            idx = bisect.bisect_left(self._entries, (old, member))
            del self._entries[idx]
        bisect.insort(self._entries, (score, member))
        self._scores[member] = score
        return 0 if old is not None else 1

    def range(self, start: int, stop: int) -> list[tuple[float, bytes]]:
        n = len(self._entries)
        if start < 0:
            start = max(n + start, 0)
        if stop < 0:
            stop = n + stop
        if start > stop or start >= n:
            return []
        stop = min(stop, n - 1)
        return self._entries[start:stop + 1]

    def _score_window(self, lo, lo_ex, hi, hi_ex) -> tuple[int, int]:
        entries = self._entries
        find_lo = bisect.bisect_right if lo_ex else bisect.bisect_left
        find_hi = bisect.bisect_left if hi_ex else bisect.bisect_right
        i = find_lo(entries, lo, key=_score_of)
        j = find_hi(entries, hi, key=_score_of)
        return i, max(i, j)

    def count_by_score(self, lo, lo_ex, hi, hi_ex) -> int:
        i, j = self._score_window(lo, lo_ex, hi, hi_ex)
        return j - i

    def remove_by_score(self, lo, lo_ex, hi, hi_ex) -> int:
        i, j = self._score_window(lo, lo_ex, hi, hi_ex)
        return self._remove_slice(i, j)

    def remove_by_rank(self, start: int, stop: int) -> int:
        n = len(self._entries)
        if start < 0:
            start = max(n + start, 0)
        if stop < 0:
            stop = n + stop
        if start > stop or start >= n:
            return 0
        stop = min(stop, n - 1)
        return self._remove_slice(start, stop + 1)

    def _remove_slice(self, i: int, j: int) -> int:
        for _, member in self._entries[i:j]:
            del self._scores[member]
        del self._entries[i:j]
        return j - i


# --------------------------------------------------------------------------
# Command execution
# --------------------------------------------------------------------------

class Session:
    """Per-connection broker state.

    ``deliver`` is called with encoded push bytes for pub/sub messages.
    """

    def __init__(self, deliver: Callable[[bytes], None] = lambda data: None):
        self.deliver = deliver
        self.channels: dict[bytes, None] = {}  # insertion-ordered set

    @property
    def subscribed(self) -> bool:
        return bool(self.channels)


_ARITY = {
    b"ping": -1, b"del": -2, b"zadd": -4, b"zrange": -4, b"zcard": 2,
    b"zcount": 4, b"zremrangebyscore": 4, b"zremrangebyrank": 4,
    b"publish": 3, b"subscribe": -2, b"unsubscribe": -1,
}
_SUBSCRIBED_ALLOWED = {b"ping", b"subscribe", b"unsubscribe"}

_ERR_FLOAT = ErrorReply("ERR value is not a valid float")
_ERR_INT = ErrorReply("ERR value is not an integer or out of range")
_ERR_RANGE = ErrorReply("ERR min or max is not a float")
_ERR_SYNTAX = ErrorReply("ERR syntax error")


def _error(text: str) -> ErrorReply:
    return ErrorReply(text.replace("\r", " ").replace("\n", " "))


class Keyspace:
    """Broker state and command dispatch, independent of any transport."""

    def __init__(self):
        self.keys: dict[bytes, SortedSet] = {}
        self.channels: dict[bytes, dict[Session, None]] = {}

    # -- dispatch ------------------------------------------------------------

    def execute(self, session: Session, argv: list[bytes]) -> list:
        """Run one command and return the reply values for the caller.

        Pushes for other subscribers are sent through their sessions'
        ``deliver`` callbacks before this returns.
        """
        name = argv[0].lower()
        arity = _ARITY.get(name)
        if arity is None:
            args = b""
            for arg in argv[1:]:
                if len(args) >= 128:
                    break
                args += b"`" + arg[:128 - len(args)] + b"`, "
            return [_error("ERR unknown command `%s`, with args beginning with: %s"
                           % (argv[0].decode("utf-8", "replace"),
                              args.decode("utf-8", "replace")))]
        if (arity > 0 and len(argv) != arity) or (arity < 0 and len(argv) < -arity):
            return [_error(f"ERR wrong number of arguments for '{name.decode()}' command")]
        if session.subscribed and name not in _SUBSCRIBED_ALLOWED:
            return [_error(f"ERR Can't execute '{name.decode()}': only (P)SUBSCRIBE / "
                           "(P)UNSUBSCRIBE / PING / QUIT / RESET are allowed in this context")]
        handler = getattr(self, "cmd_" + name.decode())
        return handler(session, argv[1:])

    # -- generic ---------------------------------------------------------

    def cmd_ping(self, session, args):
        if len(args) > 1:
            return [_error("ERR wrong number of arguments for 'ping' command")]
        if session.subscribed:
            return [[b"pong", args[0] if args else b""]]
        if args:
            return [args[0]]
        return [SimpleString("PONG")]

    def cmd_del(self, session, args):
        removed = 0
        for key in args:
            if self.keys.pop(key, None) is not None:
                removed += 1
        return [removed]

    # -- sorted sets -------------------------------------------------------

    def cmd_zadd(self, session, args):
        key, rest = args[0], args[1:]
        nx = xx = gt = lt = ch = False
        while rest:
            flag = rest[0].lower()
            if flag == b"nx":
                nx = True
            elif flag == b"xx":
                xx = True
            elif flag == b"gt":
                gt = True
            elif flag == b"lt":
                lt = True
            elif flag == b"ch":
                ch = True
            else:
                break
            rest = rest[1:]
        if not rest or len(rest) % 2:
            return [_ERR_SYNTAX]
        if nx and xx:
            return [_error("ERR XX and NX options at the same time are not compatible")]
        if (gt and nx) or (lt and nx) or (gt and lt):
            return [_error("ERR GT, LT, and/or NX options at the same time are not compatible")]
        pairs = []
        for i in range(0, len(rest), 2):
            score = parse_score(rest[i])
            if score is None:
                return [_ERR_FLOAT]
            pairs.append((score, rest[i + 1]))
        zset = self.keys.get(key)
        if zset is None:
            if xx:
                return [0]
            zset = self.keys[key] = SortedSet()
        added = changed = 0
        for score, member in pairs:
            old = zset.score(member)
            if old is None:
                if xx:
                    continue
                added += zset.add(score, member)
            else:
                if nx or (gt and score <= old) or (lt and score >= old):
                    continue
                if old != score:
                    zset.add(score, member)
                    changed += 1
        if not zset:
            del self.keys[key]
        return [added + changed if ch else added]

    def cmd_zrange(self, session, args):
        key, start, stop, opts = args[0], args[1], args[2], args[3:]
        withscores = False
        for opt in opts:
            if opt.lower() == b"withscores":
                withscores = True
            else:
                return [_ERR_SYNTAX]
        start_i, stop_i = parse_int(start), parse_int(stop)
        if start_i is None or stop_i is None:
            return [_ERR_INT]
        zset = self.keys.get(key)
        if zset is None:
            return [[]]
        out = []
        for score, member in zset.range(start_i, stop_i):
            out.append(member)
            if withscores:
                out.append(format_score(score))
        return [out]

    def cmd_zcard(self, session, args):
        zset = self.keys.get(args[0])
        return [len(zset) if zset else 0]

    def _range_args(self, args):
        lo, hi = parse_range_bound(args[1]), parse_range_bound(args[2])
        if lo is None or hi is None:
            return None
        return lo[0], lo[1], hi[0], hi[1]

    def cmd_zcount(self, session, args):
        bounds = self._range_args(args)
        if bounds is None:
            return [_ERR_RANGE]
        zset = self.keys.get(args[0])
        return [zset.count_by_score(*bounds) if zset else 0]

    def cmd_zremrangebyscore(self, session, args):
        bounds = self._range_args(args)
        if bounds is None:
            return [_ERR_RANGE]
        zset = self.keys.get(args[0])
        if zset is None:
            return [0]
        removed = zset.remove_by_score(*bounds)
        if not zset:
            del self.keys[args[0]]
        return [removed]

    def cmd_zremrangebyrank(self, session, args):
        start, stop = parse_int(args[1]), parse_int(args[2])
        if start is None or stop is None:
            return [_ERR_INT]
        zset = self.keys.get(args[0])
        if zset is None:
            return [0]
        removed = zset.remove_by_rank(start, stop)
        if not zset:
            del self.keys[args[0]]
        return [removed]

    # -- pub/sub -------------------------------------------------------------

    def cmd_publish(self, session, args):
        channel, payload = args
        subscribers = self.channels.get(channel)
        if not subscribers:
            return [0]
        push = encode([b"message", channel, payload])
        # copy: a deliver callback may drop a slow subscriber mid-loop
        for sub in list(subscribers):
            sub.deliver(push)
        return [len(subscribers)]

    def cmd_subscribe(self, session, args):
        replies = []
        for channel in args:
            if channel not in session.channels:
                session.channels[channel] = None
                self.channels.setdefault(channel, {})[session] = None
            replies.append([b"subscribe", channel, len(session.channels)])
        return replies

    def cmd_unsubscribe(self, session, args):
        targets = args or list(session.channels)
        if not targets:
            return [[b"unsubscribe", None, 0]]
        replies = []
        for channel in targets:
            self._detach(session, channel)
            replies.append([b"unsubscribe", channel, len(session.channels)])
        return replies

    def _detach(self, session: Session, channel: bytes) -> None:
        session.channels.pop(channel, None)
        subs = self.channels.get(channel)
        if subs is not None:
            subs.pop(session, None)
            if not subs:
                del self.channels[channel]

    def drop(self, session: Session) -> None:
        """Forget a closed connection."""
        for channel in list(session.channels):
            self._detach(session, channel)


# --------------------------------------------------------------------------
# Network server
# --------------------------------------------------------------------------

class _Connection(asyncio.Protocol):
    def __init__(self, server: "MiniBroker"):
        self.server = server
        self.transport: Optional[asyncio.Transport] = None
        self.decoder = Decoder()
        self.session = Session(self._deliver)

    def connection_made(self, transport):
        self.transport = transport
        self.server._conns.add(self)

    def connection_lost(self, exc):
        self.server.keyspace.drop(self.session)
        self.server._conns.discard(self)

    def _deliver(self, data: bytes) -> None:
        transport = self.transport
        if transport is None or transport.is_closing():
            return
        transport.write(data)
        if transport.get_write_buffer_size() > self.server.max_outbound:
            log.warning("dropping slow subscriber %s", transport.get_extra_info("peername"))
            self.server.keyspace.drop(self.session)
            transport.abort()

    def data_received(self, data):
        self.decoder.feed(data)
        out = []
        while True:
            try:
                request = self.decoder.gets()
            except ProtocolError as exc:
                out.append(encode(_error(f"ERR Protocol error: {exc}")))
                self.transport.write(b"".join(out))
                self.transport.close()
                return
            if request is NEED_MORE:
                break
            if (not isinstance(request, list) or not request
                    or not all(isinstance(a, bytes) for a in request)):
                out.append(encode(_error("ERR Protocol error: expected array of bulk strings")))
                self.transport.write(b"".join(out))
                self.transport.close()
                return
            for reply in self.server.keyspace.execute(self.session, request):
                out.append(encode(reply))
            # flush per command so pushes to this same connection keep order
            self.transport.write(b"".join(out))
            out.clear()
            if self.transport.is_closing():
                return


class MiniBroker:
    """TCP front end for :class:`Keyspace`.

    Use :meth:`start`/:meth:`stop` (or a ``with`` block) to run it on a
    background thread, or :func:`serve` to block the caller.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 max_outbound: int = DEFAULT_MAX_OUTBOUND):
        self.host = host
        self.port = port
        self.max_outbound = max_outbound
        self.keyspace = Keyspace()
        self._conns: set[_Connection] = set()
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._server: Optional[asyncio.AbstractServer] = None
        self._thread: Optional[threading.Thread] = None
        self._stopped: Optional[asyncio.Event] = None

    async def _run(self, ready: Optional[threading.Event] = None,
                   errors: Optional[list] = None) -> None:
        self._loop = asyncio.get_running_loop()
        self._stopped = asyncio.Event()
        try:
            self._server = await self._loop.create_server(
                lambda: _Connection(self), self.host, self.port)
        except OSError as exc:
            if errors is not None:
                errors.append(exc)
            if ready is not None:
                ready.set()
            raise
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("broker listening on %s:%d", self.host, self.port)
        if ready is not None:
            ready.set()
        try:
            await self._stopped.wait()
        finally:
            self._server.close()
            for conn in list(self._conns):
                if conn.transport is not None:
                    conn.transport.abort()
            await self._server.wait_closed()
            self.keyspace = Keyspace()

    def start(self) -> "MiniBroker":
        ready = threading.Event()
        errors: list = []

        def target():
            try:
                asyncio.run(self._run(ready, errors))
            except OSError:
                pass

        self._thread = threading.Thread(target=target, name="minibroker", daemon=True)
        self._thread.start()
        ready.wait()
        if errors:
            self._thread.join()
            raise errors[0]
        return self

    def stop(self, timeout: float = 5.0) -> None:
        if self._loop is not None and self._stopped is not None:
            try:
                self._loop.call_soon_threadsafe(self._stopped.set)
            except RuntimeError:
                pass  # loop already closed
        if self._thread is not None:
            self._thread.join(timeout)
            self._thread = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    @property
    def connection_count(self) -> int:
        return len(self._conns)


def serve(host: str = "127.0.0.1", port: int = 6379,
          shutdown: Optional[threading.Event] = None,
          max_outbound: int = DEFAULT_MAX_OUTBOUND) -> None:
    """Run a broker until ``shutdown`` is set (or forever if ``None``).

    Raises ``OSError`` if the port cannot be bound.
    """
    broker = MiniBroker(host, port, max_outbound).start()
    try:
        if shutdown is None:
            threading.Event().wait()
        else:
            shutdown.wait()
    finally:
        broker.stop()
