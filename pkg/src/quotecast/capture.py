"""Store-and-publish daemon.

Each poll fetches a batch of quotes. When the tell symbol's cumulative
volume has moved since the previous poll, every record in the batch is
added to its symbol's sorted set (score = trade time) and published on the
channel of the same name. The stored member and the published payload are
the same ``time;close;change;pct_change;volume`` string.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Optional

from .clock import SystemClock, iso_utc
from .feed import QuoteRecord, SourceError, SymbolSet, format_number, poll
from .resp import ErrorReply, ProtocolError

log = logging.getLogger(__name__)

POLL_SECS = 10.0
BACKOFF_SECS = 15.0


def encode_payload(record: QuoteRecord) -> str:
    return ";".join((str(record.time), format_number(record.close),
                     format_number(record.change), format_number(record.pct_change),
                     format_number(record.volume)))


class StoreError(Exception):
    """The broker rejected a write."""


def store_and_publish(conn, symbol: str, record: QuoteRecord) -> int:
    """ZADD the payload under ``symbol`` then PUBLISH it on ``symbol``.

    Returns the number of subscribers that received it.
    """
    payload = encode_payload(record)
    reply = conn.command(["ZADD", symbol, str(record.time), payload])
    if isinstance(reply, ErrorReply):
        raise StoreError(f"ZADD {symbol}: {reply}")
    reply = conn.command(["PUBLISH", symbol, payload])
    if isinstance(reply, ErrorReply):
        raise StoreError(f"PUBLISH {symbol}: {reply}")
    return reply


_UNSET = object()


@dataclass
class CaptureState:
    prev_volume: object = _UNSET
    errored: bool = False
    poll_secs: float = POLL_SECS
    backoff_secs: float = BACKOFF_SECS
    polls: int = 0
    stored_batches: int = 0
    failures: int = 0
    need_reconnect: bool = False

    @property
    def has_prev(self) -> bool:
        return self.prev_volume is not _UNSET


def _msg(clock, text: str, level: int = logging.INFO) -> None:
    log.log(level, "%s %s", iso_utc(clock.now()), text)


def run_capture(conn, source, symbols: SymbolSet, state: Optional[CaptureState] = None,
                clock=None, shutdown: Optional[threading.Event] = None,
                max_polls: Optional[int] = None) -> CaptureState:
    """Poll, store and publish until ``shutdown`` is set or ``max_polls`` ran.

    Poll and store failures never escape: they are logged, the loop sleeps
    for the backoff interval and tries again. A connection that failed is
    reopened (``conn.reconnect()``) before the next store.
    """
    state = state or CaptureState()
    clock = clock or SystemClock(shutdown)
    while not (shutdown is not None and shutdown.is_set()):
        if max_polls is not None and state.polls >= max_polls:
            break
        state.polls += 1
        try:
            batch = poll(source, symbols, clock)
        except SourceError as exc:
            _fail(clock, state, f"Error: {exc}")
            continue
        if state.errored:
            state.errored = False
            _msg(clock, "...recovered")

        volume = batch[symbols.tell].volume
        if not state.has_prev or volume != state.prev_volume:
            try:
                if state.need_reconnect:
                    conn.reconnect()
                    state.need_reconnect = False
                for symbol in symbols:
                    store_and_publish(conn, symbol, batch[symbol])
            except (OSError, ProtocolError, StoreError) as exc:
                state.need_reconnect = not isinstance(exc, StoreError)
                _fail(clock, state, f"Error storing: {exc}")
                continue
            state.stored_batches += 1
            _msg(clock, f"Storing {symbols.tell} volume {format_number(volume)}")
        state.prev_volume = volume
        clock.sleep(state.poll_secs)
    return state


def _fail(clock, state: CaptureState, text: str) -> None:
    _msg(clock, text, logging.WARNING)
    state.errored = True
    state.failures += 1
    clock.sleep(state.backoff_secs)
