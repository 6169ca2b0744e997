import io
import logging
import random
import threading
from collections import Counter
from datetime import datetime, timezone

import pytest
from hypothesis import given
from hypothesis import strategies as st

from quotecast.capture import encode_payload, run_capture, store_and_publish
from quotecast.clock import VirtualClock
from quotecast.feed import QuoteRecord, SymbolSet, SyntheticSource, read_replay
from quotecast.monitor import (CallbackRegistry, Decoded, MalformedPayload, MonitorStats,
                               Raw, TerminalSink, TimeSeries, Timeout, append_dedup,
                               column_levels, decode_payload, export_csv, get_all_data,
                               monitor_channels, most_recent_n_days, render, run_monitor)
from quotecast.resp import connect

DAY = 86_400
D0 = 19_000 * DAY  # a UTC midnight


def rec(t, close=1.0, vol=0):
    return QuoteRecord(t, close, 0.0, 0.0, vol)


# -- payload decoding ---------------------------------------------------------

def test_decode_payload_examples():
    assert decode_payload("1647381600;4261.75;-0.25;-0.0059;1200000") == \
        QuoteRecord(1647381600, 4261.75, -0.25, -0.0059, 1200000)
    assert decode_payload(b"1;0;0;0;0") == QuoteRecord(1, 0, 0, 0, 0)


@pytest.mark.parametrize("bad", ["1;2;3;4", "1;2;3;4;5;6", "1;x;0;0;0", "1.5;1;0;0;0",
                                 "1;nan;0;0;0", "0;1;0;0;0", "", "1;1;0;0;-1"])
def test_decode_payload_rejects(bad):
    with pytest.raises(MalformedPayload):
        decode_payload(bad)


# -- storage reads -------------------------------------------------------------

def test_get_all_data_empty(client):
    assert len(get_all_data(client(), "ES=F")) == 0


def test_get_all_data_orders_by_time(client):
    conn = client()
    for t in (30, 10, 20):
        store_and_publish(conn, "ES=F", rec(t, close=t))
    s = get_all_data(conn, "ES=F")
    assert s.times == [10, 20, 30]


def test_get_all_data_skips_malformed(client, caplog):
    conn = client()
    for t in range(1, 5):
        store_and_publish(conn, "ES=F", rec(t))
    conn.command(["ZADD", "ES=F", 5, "1;2;3;4"])
    with caplog.at_level(logging.WARNING, logger="quotecast.monitor"):
        s = get_all_data(conn, "ES=F")
    assert len(s) == 4
    assert sum("malformed" in r.getMessage() for r in caplog.records) == 1


# -- dedup ---------------------------------------------------------------------

def test_append_dedup_examples():
    base = TimeSeries("S", [rec(1, 10), rec(2, 20)])
    assert len(append_dedup(base, [rec(3)])) == 3
    kept = append_dedup(base, [rec(2, 99)])
    assert len(kept) == 2 and kept[1].close == 20
    assert append_dedup(base, []) == base
    # input not mutated
    assert len(base) == 2


def test_out_of_order_insert():
    s = append_dedup(TimeSeries("S", [rec(1), rec(5)]), [rec(3), rec(4), rec(2)])
    assert s.times == [1, 2, 3, 4, 5]


points = st.lists(st.builds(rec, st.integers(1, 50), st.floats(-1e6, 1e6)), max_size=30)


@given(points, points)
def test_append_dedup_idempotent_and_keep_first(a, b):
    base = TimeSeries("S", a)
    once = append_dedup(base, b)
    assert append_dedup(once, b) == once
    assert once.times == sorted(set(once.times))
    first = {}
    for p in a + b:
        first.setdefault(p.time, p)
    assert once.as_dict() == first


# -- windowing -----------------------------------------------------------------

def oracle_recent_days(points, n, minobs):
    """Reference procedure written against calendar dates, independent of the library."""
    def date(t):
        return datetime.fromtimestamp(t, tz=timezone.utc).date()
    counts = Counter(date(p.time) for p in points)
    if len(counts) < n:
        return list(points)
    qualifying = [d for d in sorted(counts) if counts[d] > minobs]
    if not qualifying:
        return list(points)
    start = qualifying[-n:][0]
    cutoff = datetime(start.year, start.month, start.day, tzinfo=timezone.utc).timestamp()
    return [p for p in points if p.time >= cutoff]


def series_with_counts(counts, rng=None, start=D0):
    rng = rng or random.Random(0)
    pts = []
    for i, c in enumerate(counts):
        for t in sorted(rng.sample(range(DAY), c)):
            pts.append(rec(start + i * DAY + t))
    return TimeSeries("S", pts)


def test_window_keeps_from_second_day():
    s = series_with_counts([2000, 1600, 1800])
    out = most_recent_n_days(s)
    assert out.times[0] >= D0 + DAY
    assert len(out) == 3400


def test_window_keeps_all_when_last_day_is_thin():
    s = series_with_counts([2000, 1600, 900])
    assert most_recent_n_days(s) == s


@pytest.mark.parametrize("counts", [[3000], [100, 200, 300]])
def test_window_returns_input_unchanged(counts):
    s = series_with_counts(counts)
    assert most_recent_n_days(s) is s


def test_window_matches_oracle_randomized():
    rng = random.Random(1234)
    for _ in range(500):
        ndays = rng.randint(1, 6)
        minobs = rng.randint(0, 40)
        counts = [rng.choice([0, rng.randint(1, 2 * minobs + 2)]) for _ in range(ndays)]
        n = rng.randint(1, 4)
        s = series_with_counts(counts, rng, start=D0 + rng.randint(0, 400) * DAY)
        got = most_recent_n_days(s, n, minobs)
        assert list(got) == oracle_recent_days(list(s), n, minobs)


# -- channel dispatch ------------------------------------------------------------

def test_monitor_channels_variants(client):
    sub, pub = client(), client()
    reg = CallbackRegistry.for_symbols(["ES=F"])
    sub.send(["SUBSCRIBE", "ES=F", "XX=F"])
    assert isinstance(monitor_channels(sub, reg, 2.0), Raw)  # ack
    assert isinstance(monitor_channels(sub, reg, 2.0), Raw)
    pub.command(["PUBLISH", "ES=F", "1647381600;4261.75;-0.25;-0.0059;1200000"])
    got = monitor_channels(sub, reg, 2.0)
    assert got == Decoded("ES=F", (QuoteRecord(1647381600, 4261.75, -0.25, -0.0059, 1200000),))
    pub.command(["PUBLISH", "XX=F", "1;0;0;0;0"])
    assert isinstance(monitor_channels(sub, reg, 2.0), Raw)
    pub.command(["PUBLISH", "ES=F", "garbage"])
    bad = monitor_channels(sub, reg, 2.0)
    assert isinstance(bad, Raw) and bad.error
    assert isinstance(monitor_channels(sub, reg, 0.05), Timeout)


def test_registry_lookup_is_exact():
    reg = CallbackRegistry()
    reg.register("ES=F")
    assert "ES=F" in reg and "es=f" not in reg and reg.get("GC=F") is None


# -- main loop --------------------------------------------------------------------

def _connector(broker):
    return lambda: connect("127.0.0.1", broker.port, timeout=5.0)


def test_run_monitor_matches_storage(broker, client):
    syms = SymbolSet(("ES=F", "GC=F"), tell_index=0)
    writer = client()
    clock = VirtualClock()
    run_capture(writer, SyntheticSource(seed=3, p_trade=1.0), syms, clock=clock, max_polls=4)
    stop = threading.Event()
    ready = threading.Event()
    result = {}

    class Probe:
        def __call__(self, series_map):
            ready.set()

    t = threading.Thread(target=lambda: result.update(run_monitor(
        _connector(broker), syms.symbols, sink=Probe(), shutdown=stop,
        listen_timeout=0.05, min_redraw=0.0, clock=VirtualClock())))
    t.start()
    assert ready.wait(5)
    # started mid-stream: six more polls arrive live
    run_capture(writer, SyntheticSource(seed=4, p_trade=1.0), syms, clock=clock, max_polls=6)
    reader = client()
    deadline = threading.Event()
    for _ in range(200):
        stored = {s: get_all_data(reader, s) for s in syms}
        if all(len(stored[s]) == 10 for s in syms):
            break
        deadline.wait(0.01)
    deadline.wait(0.3)
    stop.set()
    t.join(5)
    for s in syms:
        assert result[s].as_dict() == stored[s].as_dict()
        assert len(result[s]) == 10


def test_run_monitor_idle_emits_on_timeout(broker):
    emits = []
    stats = MonitorStats()
    run_monitor(_connector(broker), ["ES=F"], sink=emits.append, listen_timeout=0.01,
                min_redraw=0.0, max_iterations=5, stats=stats, clock=VirtualClock())
    assert stats.timeouts >= 4
    assert len(emits) >= 5


def test_run_monitor_backs_off_when_broker_missing():
    clock = VirtualClock()

    def refuse():
        raise ConnectionRefusedError("nope")

    run_monitor(refuse, ["ES=F"], clock=clock, max_iterations=8)
    assert clock.sleeps == [1, 2, 4, 8, 16, 32, 60, 60]


# -- views -----------------------------------------------------------------------

def test_render_empty_series():
    out = render({"ES=F": TimeSeries("ES=F")})
    assert "no data" in out


def test_render_is_deterministic_and_annotated():
    s = TimeSeries("ES=F", [QuoteRecord(D0 + i, 100 + i, i, 0.1 * i, 5) for i in range(20)])
    a = render({"ES=F": s}, width=20, height=5)
    assert a == render({"ES=F": s}, width=20, height=5)
    assert "last 119" in a and "chg 19" in a
    assert render({"ES=F": s}, ascii=True).isascii()


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200, unique=True),
       st.integers(1, 80), st.integers(1, 20))
def test_increasing_closes_give_non_decreasing_rows(closes, width, height):
    levels = column_levels(sorted(closes), width, height)
    assert levels == sorted(levels)
    assert all(0 <= lv < height for lv in levels)


def test_render_rejects_bad_dimensions():
    with pytest.raises(ValueError):
        render({}, width=0)


def test_terminal_sink_writes_chart():
    buf = io.StringIO()
    TerminalSink(buf, clear=False)({"ES=F": TimeSeries("ES=F", [rec(D0)])})
    assert buf.getvalue().startswith("ES=F")


def test_export_then_replay_round_trip(tmp_path):
    rng = random.Random(8)
    series = {s: TimeSeries(s, [QuoteRecord(D0 + 10 * i, rng.uniform(1, 5000), rng.gauss(0, 3),
                                            rng.gauss(0, 1), rng.randint(0, 10**9))
                                for i in range(50)])
              for s in ("BTC=F", "ES=F")}
    path = tmp_path / "out.csv"
    export_csv(series, path)
    assert path.read_text().splitlines()[0] == "symbol,time,close,change,pct_change,volume"
    back = read_replay(path)
    assert {s: TimeSeries(s, pts) for s, pts in back.items()} == series
