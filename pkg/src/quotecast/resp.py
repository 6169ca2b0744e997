"""RESP2 wire codec and a small blocking client.

Values map onto Python types:

    SimpleString  -> SimpleString (str subclass)
    Error         -> ErrorReply (str subclass)
    Integer       -> int
    BulkString    -> bytes
    Array         -> list
    Null          -> None

``SimpleString`` and ``ErrorReply`` compare unequal to plain ``str`` and to
each other, so decoded values can be checked with ``==`` without losing the
variant tag.
"""

from __future__ import annotations

import socket
from dataclasses import dataclass
from typing import Iterable, Optional, Union

CRLF = b"\r\n"

DEFAULT_MAX_DEPTH = 32
DEFAULT_MAX_ELEMENTS = 1_048_576
DEFAULT_MAX_BULK = 1 << 20

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1


class ProtocolError(Exception):
    """Raised when a byte stream cannot be a valid RESP2 encoding."""


class ClientStateError(RuntimeError):
    """A command was issued that the connection's current state forbids."""


class _TaggedText(str):
    __slots__ = ()

    def __eq__(self, other):
        return type(other) is type(self) and str.__eq__(self, other)

    def __ne__(self, other):
        return not self.__eq__(other)

    __hash__ = str.__hash__

    def __repr__(self):
        return f"{type(self).__name__}({str.__repr__(self)})"


class SimpleString(_TaggedText):
    __slots__ = ()


class ErrorReply(_TaggedText):
    __slots__ = ()

    @property
    def prefix(self) -> str:
        """Leading error code, e.g. ``ERR`` or ``WRONGTYPE``."""
        return self.split(" ", 1)[0]


RespValue = Union[SimpleString, ErrorReply, int, bytes, list, None]


class _NeedMore:
    __slots__ = ()

    def __repr__(self):
        return "NEED_MORE"

    def __bool__(self):
        return False


#: Returned by :func:`decode` and :meth:`Decoder.gets` when the buffered bytes
#: are a strict prefix of a valid encoding.
NEED_MORE = _NeedMore()


# --------------------------------------------------------------------------
# Encoding
# --------------------------------------------------------------------------

def _as_bytes(part) -> bytes:
    if isinstance(part, (bytes, bytearray, memoryview)):
        return bytes(part)
    if isinstance(part, str):
        return part.encode("utf-8", "surrogateescape")
    if isinstance(part, int) and not isinstance(part, bool):
        return str(part).encode("ascii")
    raise TypeError(f"cannot encode {type(part).__name__} as a bulk string")


def encode_command(parts: Iterable) -> bytes:
    """Encode a command as an Array of BulkStrings.

    ``parts`` may mix ``bytes``, ``str`` (UTF-8) and ``int``.
    """
    items = [_as_bytes(p) for p in parts]
    if not items:
        raise ValueError("a command needs at least one part")
    out = [b"*%d\r\n" % len(items)]
    for item in items:
        out.append(b"$%d\r\n" % len(item))
        out.append(item)
        out.append(CRLF)
    return b"".join(out)


def _encode_text(marker: bytes, text: str) -> bytes:
    raw = text.encode("utf-8", "surrogateescape")
    if b"\r" in raw or b"\n" in raw:
        raise ValueError("simple strings and errors cannot contain CR or LF")
    return marker + raw + CRLF


def encode(value: RespValue) -> bytes:
    """Encode any RESP2 value."""
    out: list[bytes] = []
    _encode_into(value, out)
    return b"".join(out)


def _encode_into(value, out: list) -> None:
    if value is None:
        out.append(b"$-1\r\n")
    elif isinstance(value, SimpleString):
        out.append(_encode_text(b"+", value))
    elif isinstance(value, ErrorReply):
        out.append(_encode_text(b"-", value))
    elif isinstance(value, bool):
        raise TypeError("bool is not a RESP value")
    elif isinstance(value, int):
        if not INT64_MIN <= value <= INT64_MAX:
            raise ValueError("integer outside signed 64-bit range")
        out.append(b":%d\r\n" % value)
    elif isinstance(value, (bytes, bytearray, memoryview)):
        data = bytes(value)
        out.append(b"$%d\r\n" % len(data))
        out.append(data)
        out.append(CRLF)
    elif isinstance(value, (list, tuple)):
        out.append(b"*%d\r\n" % len(value))
        for item in value:
            _encode_into(item, out)
    else:
        raise TypeError(f"cannot encode {type(value).__name__}")


# --------------------------------------------------------------------------
# Decoding
# --------------------------------------------------------------------------

_DIGITS = frozenset(b"0123456789")
_TYPE_BYTES = frozenset(b"+-:$*")


def _check_text_prefix(chunk: bytes) -> None:
    # CR may only appear as the start of the terminating CRLF.
    cr = chunk.find(b"\r")
    if cr != -1 and cr != len(chunk) - 1:
        raise ProtocolError("CR inside simple string or error")
    if b"\n" in chunk:
        raise ProtocolError("LF inside simple string or error")


def _check_number_prefix(chunk: bytes, kind: int, limit: int) -> None:
    """Reject a partial numeric line that no further bytes could fix."""
    if chunk.endswith(b"\r"):
        chunk = chunk[:-1]
        if not chunk or chunk == b"-":
            raise ProtocolError("empty numeric field")
    if b"\r" in chunk or b"\n" in chunk:
        raise ProtocolError("stray CR/LF in numeric field")
    body = chunk[1:] if chunk[:1] == b"-" else chunk
    if any(b not in _DIGITS for b in body):
        raise ProtocolError(f"non-numeric byte in {chr(kind)!r} header")
    if not body:
        return
    n = int(body)
    if kind == 0x3A:  # ':'
        if chunk[:1] == b"-" and -n < INT64_MIN or chunk[:1] != b"-" and n > INT64_MAX:
            raise ProtocolError("integer outside signed 64-bit range")
    elif chunk[:1] == b"-":
        if body != b"1":
            raise ProtocolError("negative length other than -1")
    elif n > limit:
        raise ProtocolError(f"length {n} exceeds limit {limit}")


def _parse_number(line: bytes) -> int:
    neg = line[:1] == b"-"
    body = line[1:] if neg else line
    if not body or any(b not in _DIGITS for b in body):
        raise ProtocolError(f"invalid integer {line!r}")
    value = -int(body) if neg else int(body)
    if not INT64_MIN <= value <= INT64_MAX:
        raise ProtocolError("integer outside signed 64-bit range")
    return value


def _parse_length(line: bytes) -> int:
    if line[:1] == b"-" and line != b"-1":
        raise ProtocolError(f"invalid length {line!r}")
    return _parse_number(line)


class Decoder:
    """Incremental RESP2 decoder.

    Feed bytes with :meth:`feed`; pull complete top-level values with
    :meth:`gets`, which returns :data:`NEED_MORE` until one is available.
    Parsing state is kept between calls, so a value split across many reads
    is never re-scanned from the start.
    """

    def __init__(self, max_depth: int = DEFAULT_MAX_DEPTH,
                 max_elements: int = DEFAULT_MAX_ELEMENTS,
                 max_bulk: int = DEFAULT_MAX_BULK):
        self.max_depth = max_depth
        self.max_elements = max_elements
        self.max_bulk = max_bulk
        self._buf = bytearray()
        self._pos = 0
        # open arrays: [remaining, items]
        self._stack: list[list] = []
        self._bulk_len: Optional[int] = None
        self._scan_from = 0

    def feed(self, data: bytes) -> None:
        self._buf += data

    @property
    def pending(self) -> int:
        """Buffered bytes not yet consumed by a complete value."""
        return len(self._buf) - self._pos

    def reset(self) -> None:
        self.__init__(self.max_depth, self.max_elements, self.max_bulk)

    def gets(self):
        buf = self._buf
        if self._pos > 65536 and self._pos * 2 > len(buf) and not self._stack \
                and self._bulk_len is None:
            del buf[:self._pos]
            self._pos = 0
        while True:
            if self._bulk_len is not None:
                n = self._bulk_len
                avail = len(buf) - self._pos
                if avail < n + 2:
                    # validate whatever part of the terminator has arrived
                    if avail > n and buf[self._pos + n] != 0x0D:
                        raise ProtocolError("bulk string not terminated by CRLF")
                    return NEED_MORE
                end = self._pos + n
                if buf[end:end + 2] != CRLF:
                    raise ProtocolError("bulk string not terminated by CRLF")
                value = bytes(buf[self._pos:end])
                self._pos = end + 2
                self._bulk_len = None
            else:
                if self._pos >= len(buf):
                    return NEED_MORE
                kind = buf[self._pos]
                if kind not in _TYPE_BYTES:
                    raise ProtocolError(f"invalid type byte {bytes([kind])!r}")
                start = self._pos + 1
                idx = buf.find(b"\r\n", max(start, self._scan_from))
                if idx == -1:
                    chunk = bytes(buf[start:])
                    if kind in (0x2B, 0x2D):
                        _check_text_prefix(chunk)
                    else:
                        limit = self.max_bulk if kind == 0x24 else self.max_elements
                        _check_number_prefix(chunk, kind, limit)
                    self._scan_from = max(start, len(buf) - 1)
                    return NEED_MORE
                self._scan_from = 0
                line = bytes(buf[start:idx])
                self._pos = idx + 2
                if kind == 0x2B or kind == 0x2D:
                    if b"\r" in line or b"\n" in line:
                        raise ProtocolError("CR/LF inside simple string or error")
                    text = line.decode("utf-8", "surrogateescape")
                    value = SimpleString(text) if kind == 0x2B else ErrorReply(text)
                elif kind == 0x3A:
                    value = _parse_number(line)
                elif kind == 0x24:
                    n = _parse_length(line)
                    if n == -1:
                        value = None
                    elif n < 0:
                        raise ProtocolError("negative bulk length")
                    elif n > self.max_bulk:
                        raise ProtocolError(f"bulk length {n} exceeds limit {self.max_bulk}")
                    else:
                        self._bulk_len = n
                        continue
                else:
                    n = _parse_length(line)
                    if n == -1:
                        value = None
                    elif n < 0:
                        raise ProtocolError("negative array length")
                    elif n > self.max_elements:
                        raise ProtocolError(f"array length {n} exceeds limit {self.max_elements}")
                    elif n == 0:
                        value = []
                    else:
                        if len(self._stack) >= self.max_depth:
                            raise ProtocolError(f"nesting deeper than {self.max_depth}")
                        self._stack.append([n, []])
                        continue

            # attach the finished value to its enclosing arrays
            while self._stack:
                frame = self._stack[-1]
                frame[1].append(value)
                frame[0] -= 1
                if frame[0]:
                    break
                self._stack.pop()
                value = frame[1]
            else:
                return value


def decode(buffer: bytes, **limits):
    """Decode one top-level value from the start of ``buffer``.

    Returns ``(value, bytes_consumed)``, or :data:`NEED_MORE` when ``buffer``
    is a strict prefix of a valid encoding. Raises :class:`ProtocolError`
    otherwise. Trailing bytes are left alone.
    """
    dec = Decoder(**limits)
    dec.feed(buffer)
    value = dec.gets()
    if value is NEED_MORE:
        return NEED_MORE
    return value, dec._pos


# --------------------------------------------------------------------------
# Client
# --------------------------------------------------------------------------

_SUBSCRIBED_OK = {b"SUBSCRIBE", b"UNSUBSCRIBE", b"PING", b"PSUBSCRIBE",
                  b"PUNSUBSCRIBE", b"QUIT", b"RESET"}


@dataclass(frozen=True)
class ChannelMessage:
    """One pub/sub push.

    ``kind`` is the first element (``"message"``, ``"subscribe"``, ...);
    ``channel`` and ``payload`` are the second and third when present.
    ``arity`` is the element count of the push array as received.
    """

    kind: str
    channel: Optional[str]
    payload: Optional[str]
    arity: int = 3

    @classmethod
    def from_value(cls, value) -> "ChannelMessage":
        if not isinstance(value, list):
            return cls(kind=_text(value), channel=None, payload=None, arity=0)
        fields = [_text(v) for v in value[:3]]
        fields += [None] * (3 - len(fields))
        return cls(fields[0] or "", fields[1], fields[2], arity=len(value))


def _text(value) -> Optional[str]:
    if value is None:
        return None
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).decode("utf-8", "surrogateescape")
    return str(value) if not isinstance(value, str) else str.__str__(value)


class ClientConnection:
    """Blocking connection to a RESP2 server.

    One owner at a time. ``command`` sends one request and reads exactly one
    reply; bytes that arrive beyond that reply stay buffered for the next
    call.
    """

    def __init__(self, host: str, port: int, timeout: float = 5.0, **limits):
        self.host = host
        self.port = port
        self.timeout = timeout
        self._limits = limits
        self._sock: Optional[socket.socket] = None
        self._decoder = Decoder(**limits)
        self.subscriptions = 0

    # -- lifecycle ---------------------------------------------------------

    def open(self) -> "ClientConnection":
        sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._decoder = Decoder(**self._limits)
        self.subscriptions = 0
        try:
            reply = self.command(["PING"])
        except BaseException:
            self.close()
            raise
        if reply != SimpleString("PONG") and reply != SimpleString("OK"):
            self.close()
            raise ProtocolError(f"unexpected PING reply {reply!r}")
        return self

    def reconnect(self) -> "ClientConnection":
        self.close()
        return self.open()

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    @property
    def closed(self) -> bool:
        return self._sock is None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- I/O -----------------------------------------------------------------

    def _read_value(self, timeout: Optional[float]):
        value = self._decoder.gets()
        if value is not NEED_MORE:
            return value
        sock = self._require_sock()
        sock.settimeout(timeout)
        while True:
            data = sock.recv(65536)
            if not data:
                self.close()
                raise ConnectionResetError("server closed the connection")
            self._decoder.feed(data)
            value = self._decoder.gets()
            if value is not NEED_MORE:
                return value

    def _require_sock(self) -> socket.socket:
        if self._sock is None:
            raise ConnectionError("connection is closed")
        return self._sock

    def send(self, parts) -> None:
        self._require_sock().sendall(encode_command(parts))

    def command(self, parts) -> RespValue:
        """Send one command and return its reply.

        Server errors come back as :class:`ErrorReply` values. While
        subscribed only SUBSCRIBE, UNSUBSCRIBE and PING may be sent.
        """
        name = _as_bytes(parts[0]).upper()
        if self.subscriptions and name not in _SUBSCRIBED_OK:
            raise ClientStateError(
                f"{name.decode(errors='replace')} not allowed while subscribed")
        self.send(parts)
        try:
            return self._read_value(self.timeout)
        except ProtocolError:
            self.close()
            raise

    def subscribe(self, *channels) -> int:
        """Subscribe to ``channels``, consuming one acknowledgment each.

        Returns the active subscription count after the last ack.
        """
        if not channels:
            raise ValueError("at least one channel required")
        self.send(["SUBSCRIBE", *channels])
        for _ in channels:
            ack = self._read_value(self.timeout)
            if isinstance(ack, ErrorReply):
                raise ProtocolError(f"subscribe failed: {ack}")
            self.subscriptions = int(ack[2])
        return self.subscriptions

    def unsubscribe(self, *channels) -> int:
        """Unsubscribe and consume the acknowledgments.

        Messages that were already in flight are skipped.
        """
        self.send(["UNSUBSCRIBE", *channels])
        expected = len(channels) or max(self.subscriptions, 1)
        seen = 0
        while seen < expected:
            value = self._read_value(self.timeout)
            if isinstance(value, list) and value and value[0] == b"unsubscribe":
                seen += 1
                self.subscriptions = int(value[2])
        return self.subscriptions

    def listen(self, timeout: Optional[float] = 1.0) -> Optional[ChannelMessage]:
        """Wait for one push. Returns ``None`` if nothing arrived in time."""
        try:
            value = self._read_value(timeout)
        except (socket.timeout, TimeoutError):
            return None
        msg = ChannelMessage.from_value(value)
        if msg.kind in ("subscribe", "unsubscribe") and msg.arity == 3:
            try:
                self.subscriptions = int(msg.payload)
            except (TypeError, ValueError):
                pass
        return msg


def connect(host: str = "127.0.0.1", port: int = 6379, timeout: float = 5.0,
            **limits) -> ClientConnection:
    """Open a connection and verify it with PING.

    Raises ``ConnectionRefusedError`` when nothing listens, ``TimeoutError``
    when the peer never answers, :class:`ProtocolError` on a bad reply.
    """
    return ClientConnection(host, port, timeout, **limits).open()
