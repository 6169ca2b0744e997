"""Subscriber side: bootstrap from storage, then follow live channels.

At start-up each symbol's full sorted set is read and trimmed to the most
recent trading days. Live payloads arriving on the symbol channels are
decoded by per-channel callbacks and merged in time order; a timestamp
that is already present keeps its first value.
"""

from __future__ import annotations

import bisect
import csv
import logging
import math
import sys
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

from .clock import SystemClock, iso_utc
from .feed import DAY, FIELDS, QuoteRecord, format_number
from .resp import ChannelMessage, ProtocolError

log = logging.getLogger(__name__)


class MalformedPayload(ValueError):
    pass


def decode_payload(payload: Union[str, bytes]) -> QuoteRecord:
    """Parse ``time;close;change;pct_change;volume`` into a record."""
    if isinstance(payload, bytes):
        payload = payload.decode("utf-8", "replace")
    parts = payload.strip().split(";")
    if len(parts) != 5:
        raise MalformedPayload(f"expected 5 fields, got {len(parts)}: {payload!r}")
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise MalformedPayload(f"unparseable number in {payload!r}") from exc
    if not all(math.isfinite(v) for v in values):
        raise MalformedPayload(f"non-finite field in {payload!r}")
    if not values[0].is_integer():
        raise MalformedPayload(f"non-integral time in {payload!r}")
    try:
        return QuoteRecord(int(values[0]), *values[1:])
    except ValueError as exc:
        raise MalformedPayload(str(exc)) from exc


# --------------------------------------------------------------------------
# Time series
# --------------------------------------------------------------------------

class TimeSeries:
    """Points for one symbol with strictly increasing, unique times."""

    __slots__ = ("symbol", "_times", "_points")

    def __init__(self, symbol: str, points: Iterable[QuoteRecord] = ()):
        self.symbol = symbol
        self._times: list[int] = []
        self._points: list[QuoteRecord] = []
        self._merge(points)

    def _merge(self, points: Iterable[QuoteRecord]) -> None:
        times, pts = self._times, self._points
        for p in points:
            if not times or p.time > times[-1]:
                times.append(p.time)
                pts.append(p)
                continue
            i = bisect.bisect_left(times, p.time)
            if times[i] == p.time:
                continue  # keep-first
            times.insert(i, p.time)
            pts.insert(i, p)

    def copy(self) -> "TimeSeries":
        new = TimeSeries(self.symbol)
        new._times = self._times.copy()
        new._points = self._points.copy()
        return new

    def __len__(self):
        return len(self._points)

    def __iter__(self):
        return iter(self._points)

    def __getitem__(self, i):
        return self._points[i]

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return self.symbol == other.symbol and self._points == other._points

    def __repr__(self):
        span = f"{self._times[0]}..{self._times[-1]}" if self._times else "empty"
        return f"TimeSeries({self.symbol!r}, {len(self)} points, {span})"

    @property
    def times(self) -> list[int]:
        return list(self._times)

    @property
    def last(self) -> Optional[QuoteRecord]:
        return self._points[-1] if self._points else None

    def as_dict(self) -> dict[int, QuoteRecord]:
        return dict(zip(self._times, self._points))

    def since(self, t: int) -> "TimeSeries":
        i = bisect.bisect_left(self._times, t)
        new = TimeSeries(self.symbol)
        new._times = self._times[i:]
        new._points = self._points[i:]
        return new


def append_dedup(series: TimeSeries, points: Iterable[QuoteRecord]) -> TimeSeries:
    """Merge ``points`` into a copy of ``series`` in time order.

    On a timestamp collision the point already present (or the earlier one
    in ``points``) wins.
    """
    new = series.copy()
    new._merge(points)
    return new


def most_recent_n_days(series: TimeSeries, n: int = 2, minobs: int = 1500) -> TimeSeries:
    """Keep the tail of ``series`` covering its last ``n`` busy UTC days.

    A day is busy when it holds more than ``minobs`` points. Among busy days
    the last ``n`` are taken and everything from midnight UTC of the
    earliest of them onward is returned. With fewer than ``n`` distinct days
    overall, or no busy day at all, the series comes back unchanged.
    """
    counts: dict[int, int] = {}
    for t in series._times:
        day = t // DAY
        counts[day] = counts.get(day, 0) + 1
    if len(counts) < n:
        return series
    busy = [d for d in sorted(counts) if counts[d] > minobs]
    if not busy:
        return series
    first_day = busy[-n:][0] if n > 0 else busy[-1]
    trimmed = series.since(first_day * DAY)
    if trimmed._times:
        log.info("%s most recent data starting at %s", series.symbol, iso_utc(trimmed._times[0]))
    return trimmed


# --------------------------------------------------------------------------
# Storage reads
# --------------------------------------------------------------------------

def decode_members(members: Sequence[bytes]) -> tuple[list[QuoteRecord], int]:
    """Decode stored members; returns (points, count of malformed members)."""
    points, bad = [], 0
    for m in members:
        try:
            points.append(decode_payload(m))
        except MalformedPayload as exc:
            bad += 1
            log.warning("skipping malformed member: %s", exc)
    return points, bad


def get_all_data(conn, symbol: str) -> TimeSeries:
    """Read a symbol's whole sorted set into a series."""
    reply = conn.command(["ZRANGE", symbol, 0, -1])
    if not isinstance(reply, list):
        raise ProtocolError(f"ZRANGE {symbol} returned {reply!r}")
    points, _ = decode_members(reply)
    return TimeSeries(symbol, points)


# --------------------------------------------------------------------------
# Channel dispatch
# --------------------------------------------------------------------------

class CallbackRegistry:
    """Payload decoders keyed by exact channel name."""

    def __init__(self, decoders: Optional[Mapping[str, Callable]] = None):
        self._decoders: dict[str, Callable] = dict(decoders or {})

    @classmethod
    def for_symbols(cls, symbols: Iterable[str], decoder: Callable = decode_payload):
        return cls({s: decoder for s in symbols})

    def register(self, channel: str, decoder: Callable = decode_payload) -> None:
        self._decoders[channel] = decoder

    def get(self, channel) -> Optional[Callable]:
        return self._decoders.get(channel)

    def __contains__(self, channel):
        return channel in self._decoders

    @property
    def channels(self) -> list[str]:
        return list(self._decoders)


@dataclass(frozen=True)
class Decoded:
    symbol: str
    points: tuple


@dataclass(frozen=True)
class Raw:
    message: ChannelMessage
    error: Optional[str] = None


@dataclass(frozen=True)
class Timeout:
    pass


def monitor_channels(conn, registry: CallbackRegistry, timeout: Optional[float] = 1.0):
    """Wait for one push and route it through the registry.

    Returns :class:`Decoded` for a ``message`` on a registered channel,
    :class:`Raw` for anything else (including payloads the decoder rejects)
    and :class:`Timeout` when nothing arrived.
    """
    msg = conn.listen(timeout)
    if msg is None:
        return Timeout()
    if msg.arity != 3 or msg.kind != "message":
        return Raw(msg)
    decoder = registry.get(msg.channel)
    if decoder is None:
        return Raw(msg)
    try:
        data = decoder(msg.payload)
    except Exception as exc:
        return Raw(msg, error=str(exc))
    points = tuple(data) if isinstance(data, (list, tuple)) else (data,)
    return Decoded(msg.channel, points)


# --------------------------------------------------------------------------
# Main loop
# --------------------------------------------------------------------------

RECONNECT_START = 1.0
RECONNECT_CAP = 60.0


def bootstrap(conn, symbols: Iterable[str], ndays: int = 2, minobs: int = 1500) -> dict[str, TimeSeries]:
    return {s: most_recent_n_days(get_all_data(conn, s), ndays, minobs) for s in symbols}


@dataclass
class MonitorStats:
    decoded: int = 0
    raw: int = 0
    timeouts: int = 0
    reconnects: int = 0
    emits: int = 0
    series: dict = field(default_factory=dict)


def run_monitor(connect: Callable, symbols: Sequence[str],
                registry: Optional[CallbackRegistry] = None,
                sink: Optional[Callable[[Mapping[str, TimeSeries]], None]] = None,
                clock=None, shutdown: Optional[threading.Event] = None,
                ndays: int = 2, minobs: int = 1500, listen_timeout: float = 1.0,
                min_redraw: float = 1.0, max_iterations: Optional[int] = None,
                stats: Optional[MonitorStats] = None) -> dict[str, TimeSeries]:
    """Follow ``symbols`` until ``shutdown`` is set; return the final series.

    ``connect`` opens a fresh :class:`~quotecast.resp.ClientConnection`. The
    loop subscribes first and reads history on a second connection
    afterwards, so nothing published during the bootstrap is lost; overlap
    between the two is removed by the keep-first merge. A dropped
    connection is retried with exponential backoff and a full bootstrap.
    """
    symbols = list(symbols)
    registry = registry or CallbackRegistry.for_symbols(symbols)
    clock = clock or SystemClock(shutdown)
    stats = stats if stats is not None else MonitorStats()
    series: dict[str, TimeSeries] = {s: TimeSeries(s) for s in symbols}
    stats.series = series
    backoff = RECONNECT_START
    sub = None
    last_emit = -math.inf
    iterations = 0

    def stopping():
        if shutdown is not None and shutdown.is_set():
            return True
        return max_iterations is not None and iterations >= max_iterations

    try:
        while not stopping():
            if sub is None:
                try:
                    sub = connect()
                    sub.subscribe(*symbols)
                    data = connect()
                    try:
                        fresh = bootstrap(data, symbols, ndays, minobs)
                    finally:
                        data.close()
                except (OSError, ProtocolError) as exc:
                    if sub is not None:
                        sub.close()
                        sub = None
                    log.warning("%s connect failed: %s; retrying in %gs",
                                iso_utc(clock.now()), exc, backoff)
                    clock.sleep(backoff)
                    backoff = min(backoff * 2, RECONNECT_CAP)
                    iterations += 1
                    continue
                series.clear()
                series.update(fresh)
                backoff = RECONNECT_START

            iterations += 1
            try:
                result = monitor_channels(sub, registry, listen_timeout)
            except (OSError, ProtocolError) as exc:
                log.warning("%s connection lost: %s", iso_utc(clock.now()), exc)
                sub.close()
                sub = None
                stats.reconnects += 1
                clock.sleep(backoff)
                backoff = min(backoff * 2, RECONNECT_CAP)
                continue

            if isinstance(result, Decoded):
                stats.decoded += 1
                current = series.get(result.symbol) or TimeSeries(result.symbol)
                series[result.symbol] = append_dedup(current, result.points)
            elif isinstance(result, Raw):
                stats.raw += 1
                if result.error:
                    log.warning("%s bad payload on %s: %s", iso_utc(clock.now()),
                                result.message.channel, result.error)
                else:
                    log.debug("%s push %s", iso_utc(clock.now()), result.message)
            else:
                stats.timeouts += 1
                log.debug("%s null data", iso_utc(clock.now()))

            now = clock.now()
            if sink is not None and now - last_emit >= min_redraw:
                sink(series)
                stats.emits += 1
                last_emit = now
    finally:
        if sub is not None:
            sub.close()
    if sink is not None:
        sink(series)
        stats.emits += 1
    return series


# --------------------------------------------------------------------------
# Views
# --------------------------------------------------------------------------

_GLYPHS = {
    False: {"flat": "─", "up_from": "╯", "up_to": "╭", "down_from": "╮", "down_to": "╰",
            "vert": "│", "axis": "┤"},
    True: {"flat": "-", "up_from": "+", "up_to": "+", "down_from": "+", "down_to": "+",
           "vert": "|", "axis": "|"},
}


def column_levels(closes: Sequence[float], width: int, height: int) -> list[int]:
    """Row level (0 = bottom) of each chart column.

    Points are bucketed evenly into ``width`` columns; a column shows the
    last close of its bucket.
    """
    if not closes:
        return []
    cols = min(width, len(closes))
    picks = [closes[((c + 1) * len(closes)) // cols - 1] for c in range(cols)]
    lo, hi = min(picks), max(picks)
    if hi == lo:
        return [height // 2] * cols
    return [min(height - 1, int((v - lo) / (hi - lo) * (height - 1) + 0.5)) for v in picks]


def render_panel(symbol: str, series: Optional[TimeSeries], width: int = 60,
                 height: int = 8, ascii: bool = False) -> list[str]:
    g = _GLYPHS[ascii]
    if series is None or not len(series):
        header = f"{symbol}  no data"
        blank = [" " * 10 + g["axis"] for _ in range(height)]
        blank[height // 2] += "no data".center(width).rstrip()
        return [header] + blank
    last = series.last
    header = (f"{symbol}  last {format_number(round(last.close, 6))}  "
              f"chg {format_number(round(last.change, 6))} "
              f"({format_number(round(last.pct_change, 4))}%)  "
              f"{iso_utc(last.time)}")
    closes = [p.close for p in series]
    levels = column_levels(closes, width, height)
    grid = [[" "] * width for _ in range(height)]
    prev = None
    for c, lvl in enumerate(levels):
        if prev is None or lvl == prev:
            grid[height - 1 - lvl][c] = g["flat"]
        else:
            up = lvl > prev
            grid[height - 1 - prev][c] = g["up_from"] if up else g["down_from"]
            grid[height - 1 - lvl][c] = g["up_to"] if up else g["down_to"]
            for r in range(min(prev, lvl) + 1, max(prev, lvl)):
                grid[height - 1 - r][c] = g["vert"]
        prev = lvl
    lo, hi = min(closes), max(closes)
    lines = [header]
    for r, row in enumerate(grid):
        if r == 0:
            label = f"{hi:>10.2f}"
        elif r == height - 1:
            label = f"{lo:>10.2f}"
        else:
            label = " " * 10
        lines.append(label + g["axis"] + "".join(row).rstrip())
    return lines


def render(series_map: Mapping[str, TimeSeries], width: int = 60, height: int = 8,
           ascii: bool = False) -> str:
    """Text chart: one panel per symbol, last price and change in the header."""
    if width <= 0 or height <= 0:
        raise ValueError("chart dimensions must be positive")
    panels = []
    for symbol, s in series_map.items():
        panels.append("\n".join(render_panel(symbol, s, width, height, ascii)))
    return "\n\n".join(panels) + "\n"


def export_csv(series_map: Mapping[str, TimeSeries], path) -> None:
    """Write ``symbol,time,close,change,pct_change,volume`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("symbol",) + FIELDS)
        for symbol, s in series_map.items():
            for p in s:
                writer.writerow([symbol] + p.as_row())


class TerminalSink:
    def __init__(self, stream=None, width: int = 60, height: int = 8,
                 ascii: bool = False, clear: Optional[bool] = None):
        self.stream = stream or sys.stdout
        self.width = width
        self.height = height
        self.ascii = ascii
        self.clear = self.stream.isatty() if clear is None else clear

    def __call__(self, series_map):
        text = render(series_map, self.width, self.height, self.ascii)
        if self.clear:
            text = "\x1b[H\x1b[2J" + text
        self.stream.write(text)
        self.stream.flush()


class CsvSink:
    def __init__(self, path):
        self.path = path

    def __call__(self, series_map):
        export_csv(series_map, self.path)


def fan_out(*sinks):
    """Combine several sinks into one."""
    def sink(series_map):
        for s in sinks:
            s(series_map)
    return sink
