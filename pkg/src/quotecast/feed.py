"""Quote sources.

A source turns "give me the current quotes for these symbols" into one
:class:`QuoteRecord` per symbol, or fails as a whole with
:class:`SourceError`. Only the five fields the capture daemon stores are
kept: trade time, last price, change, percent change and cumulative volume.
"""

from __future__ import annotations

import csv
import json
import math
import random
import urllib.request
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Protocol, Sequence, Union

FIELDS = ("time", "close", "change", "pct_change", "volume")

DEFAULT_PRICES = {
    "BTC=F": 39_000.0,
    "CL=F": 95.0,
    "ES=F": 4261.75,
    "GC=F": 1920.0,
    "^GSPC": 4262.45,
    "SPY": 426.17,
}

DAY = 86_400


class SourceError(Exception):
    """A poll failed: network trouble, a malformed body, an exhausted replay."""


def format_number(value: float) -> str:
    """Shortest decimal text that parses back to exactly ``value``.

    Integral values are written without a fractional part so volumes and
    round prices read naturally (``1200000`` rather than ``1200000.0``).
    """
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"non-finite value {value!r}")
    if value == 0.0:
        return "-0" if math.copysign(1.0, value) < 0 else "0"
    if value.is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


@dataclass(frozen=True)
class QuoteRecord:
    """One observation of one symbol. ``time`` is UTC epoch seconds."""

    time: int
    close: float
    change: float
    pct_change: float
    volume: float

    def __post_init__(self):
        if isinstance(self.time, float):
            if not self.time.is_integer():
                raise ValueError(f"time must be integral, got {self.time!r}")
            object.__setattr__(self, "time", int(self.time))
        if self.time <= 0:
            raise ValueError(f"time must be positive, got {self.time}")
        for name in ("close", "change", "pct_change", "volume"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        if self.volume < 0:
            raise ValueError(f"volume must be non-negative, got {self.volume}")

    def as_row(self) -> list[str]:
        return [str(self.time)] + [format_number(getattr(self, f)) for f in FIELDS[1:]]


QuoteBatch = dict  # symbol -> QuoteRecord


@dataclass(frozen=True)
class SymbolSet:
    """Ordered symbols plus the index of the one whose volume gates storage.

    The default tell is the third symbol (or the last one for shorter lists).
    """

    symbols: tuple
    tell_index: Optional[int] = None

    def __post_init__(self):
        symbols = tuple(self.symbols)
        object.__setattr__(self, "symbols", symbols)
        if not symbols:
            raise ValueError("at least one symbol is required")
        if len(set(symbols)) != len(symbols):
            raise ValueError(f"duplicate symbols in {symbols}")
        if self.tell_index is None:
            object.__setattr__(self, "tell_index", min(2, len(symbols) - 1))
        if not 0 <= self.tell_index < len(symbols):
            raise ValueError(f"tell index {self.tell_index} out of range for {len(symbols)} symbols")

    @classmethod
    def parse(cls, text: str, tell_index: Optional[int] = None) -> "SymbolSet":
        return cls(tuple(s.strip() for s in text.split(",") if s.strip()), tell_index)

    @property
    def tell(self) -> str:
        return self.symbols[self.tell_index]

    def __iter__(self):
        return iter(self.symbols)

    def __len__(self):
        return len(self.symbols)


class QuoteSource(Protocol):
    def fetch(self, symbols: Sequence[str], now: float) -> Mapping[str, QuoteRecord]:
        ...


def poll(source: QuoteSource, symbols: Union[SymbolSet, Sequence[str]], clock) -> QuoteBatch:
    """Fetch one snapshot of every symbol, all or nothing.

    Any failure inside the source, or a batch missing a symbol, surfaces as
    :class:`SourceError`.
    """
    names = list(symbols)
    try:
        batch = source.fetch(names, clock.now())
    except SourceError:
        raise
    except Exception as exc:
        raise SourceError(f"{type(exc).__name__}: {exc}") from exc
    missing = [s for s in names if s not in batch]
    if missing:
        raise SourceError(f"no quote for {', '.join(missing)}")
    return {s: batch[s] for s in names}


# --------------------------------------------------------------------------
# Synthetic source
# --------------------------------------------------------------------------

@dataclass
class SyntheticState:
    close: float
    volume: float
    session_open: float
    session: Optional[int] = None


def synthetic_step(state: SyntheticState, now: float, rng: random.Random,
                   step: float = 0.001, p_trade: float = 0.9,
                   session_offset: float = 0.0) -> QuoteRecord:
    """Advance one symbol's random walk by one observation.

    The price moves by a factor drawn uniformly from ``1 +/- step``. Volume
    grows by a random lot with probability ``p_trade`` and otherwise stays
    flat. Change and percent change are measured against the price at the
    start of the current session; sessions roll at ``session_offset``
    seconds past midnight UTC.
    """
    session = int((now - session_offset) // DAY)
    if state.session != session:
        state.session = session
        state.session_open = state.close
    state.close = state.close * (1.0 + rng.uniform(-step, step))
    if rng.random() < p_trade:
        state.volume += rng.randint(1, 500)
    change = state.close - state.session_open
    return QuoteRecord(
        time=int(now),
        close=state.close,
        change=change,
        pct_change=100.0 * change / state.session_open,
        volume=state.volume,
    )


class SyntheticSource:
    """Seeded random-walk quotes, one independent walk per symbol."""

    def __init__(self, seed: int = 0, p_trade: float = 0.9, step: float = 0.001,
                 prices: Optional[Mapping[str, float]] = None,
                 session_offset: float = 0.0, start_volume: float = 1_000_000.0):
        if not 0.0 <= p_trade <= 1.0:
            raise ValueError("p_trade must be within [0, 1]")
        self.rng = random.Random(seed)
        self.p_trade = p_trade
        self.step = step
        self.prices = dict(DEFAULT_PRICES, **(prices or {}))
        self.session_offset = session_offset
        self.start_volume = start_volume
        self.states: dict[str, SyntheticState] = {}

    def _state(self, symbol: str) -> SyntheticState:
        state = self.states.get(symbol)
        if state is None:
            price = self.prices.get(symbol, 100.0)
            state = self.states[symbol] = SyntheticState(price, self.start_volume, price)
        return state

    def fetch(self, symbols, now):
        return {s: synthetic_step(self._state(s), now, self.rng, self.step,
                                  self.p_trade, self.session_offset)
                for s in symbols}


# --------------------------------------------------------------------------
# Replay source
# --------------------------------------------------------------------------

def write_replay(path, records: Union[Sequence[QuoteRecord], Mapping[str, Sequence[QuoteRecord]]]) -> None:
    """Write records as replay CSV.

    A plain sequence gives the single-symbol layout; a mapping of symbol to
    records adds a leading ``symbol`` column.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if isinstance(records, Mapping):
            writer.writerow(("symbol",) + FIELDS)
            for symbol, recs in records.items():
                for rec in recs:
                    writer.writerow([symbol] + rec.as_row())
        else:
            writer.writerow(FIELDS)
            for rec in records:
                writer.writerow(rec.as_row())


def read_replay(path, symbol: Optional[str] = None) -> dict[str, list[QuoteRecord]]:
    """Parse a replay CSV into per-symbol record lists in file order.

    Files without a ``symbol`` column need ``symbol``. Extra columns are
    ignored.
    """
    out: dict[str, list[QuoteRecord]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [f for f in FIELDS if f not in header]
        if missing:
            raise SourceError(f"{path}: missing columns {missing}")
        has_symbol = "symbol" in header
        if not has_symbol and symbol is None:
            raise SourceError(f"{path}: no symbol column and no symbol given")
        for lineno, row in enumerate(reader, start=2):
            try:
                rec = QuoteRecord(int(row["time"]), float(row["close"]), float(row["change"]),
                                  float(row["pct_change"]), float(row["volume"]))
            except (TypeError, ValueError) as exc:
                raise SourceError(f"{path}:{lineno}: {exc}") from exc
            out.setdefault(row["symbol"] if has_symbol else symbol, []).append(rec)
    return out


class ReplaySource:
    """Plays recorded quotes back, one row per symbol per poll.

    Record times come from the file, not the clock.
    """

    def __init__(self, records: Mapping[str, Sequence[QuoteRecord]]):
        self.records = {s: list(r) for s, r in records.items()}
        self.cursor = {s: 0 for s in self.records}

    @classmethod
    def from_csv(cls, path, symbol: Optional[str] = None) -> "ReplaySource":
        return cls(read_replay(path, symbol))

    def fetch(self, symbols, now):
        batch = {}
        for s in symbols:
            rows = self.records.get(s)
            if rows is None:
                raise SourceError(f"replay has no data for {s}")
            if self.cursor[s] >= len(rows):
                raise SourceError(f"replay exhausted for {s}")
            batch[s] = rows[self.cursor[s]]
        for s in symbols:
            self.cursor[s] += 1
        return batch


# --------------------------------------------------------------------------
# Fault injection and HTTP
# --------------------------------------------------------------------------

class FaultInjectingSource:
    """Wraps a source and fails chosen polls (1-based) or while ``armed``."""

    def __init__(self, inner: QuoteSource, fail_polls: Iterable[int] = (),
                 message: str = "injected fault"):
        self.inner = inner
        self.fail_polls = set(fail_polls)
        self.message = message
        self.armed = False
        self.polls = 0

    def fetch(self, symbols, now):
        self.polls += 1
        if self.armed or self.polls in self.fail_polls:
            raise SourceError(self.message)
        return self.inner.fetch(symbols, now)


class HttpQuoteSource:
    """Fetches quotes from an HTTP endpoint returning JSON.

    Disabled unless ``enabled=True``. The URL gets ``symbols`` substituted
    as a comma-separated list; the body must look like::

        {"quotes": [{"symbol": "ES=F", "time": 1647381600, "close": 4261.75,
                     "change": -0.25, "pct_change": -0.0059, "volume": 1200000}]}
    """

    def __init__(self, url_template: str, enabled: bool = False, timeout: float = 10.0):
        self.url_template = url_template
        self.enabled = enabled
        self.timeout = timeout

    def fetch(self, symbols, now):
        if not self.enabled:
            raise SourceError("HTTP quote source is disabled")
        url = self.url_template.format(symbols=",".join(symbols))
        try:
            with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                body = resp.read()
        except OSError as exc:
            raise SourceError(f"HTTP fetch failed: {exc}") from exc
        return parse_http_body(body)


def parse_http_body(body: Union[bytes, str]) -> dict[str, QuoteRecord]:
    try:
        doc = json.loads(body)
        return {q["symbol"]: QuoteRecord(int(q["time"]), q["close"], q["change"],
                                         q["pct_change"], q["volume"])
                for q in doc["quotes"]}
    except (ValueError, KeyError, TypeError) as exc:
        raise SourceError(f"malformed quote body: {exc}") from exc
