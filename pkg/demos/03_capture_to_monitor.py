"""Capture synthetic quotes on virtual time, then read them back as the monitor does."""

import logging

from quotecast.broker import MiniBroker
from quotecast.capture import run_capture
from quotecast.clock import VirtualClock
from quotecast.feed import FaultInjectingSource, SymbolSet, SyntheticSource
from quotecast.monitor import bootstrap, render
from quotecast.resp import connect

logging.basicConfig(level=logging.INFO, format="%(message)s")

symbols = SymbolSet(("BTC=F", "CL=F", "ES=F", "GC=F"))
source = FaultInjectingSource(SyntheticSource(seed=7, p_trade=0.9), fail_polls={5, 6})
clock = VirtualClock()

with MiniBroker("127.0.0.1", 0) as broker, connect("127.0.0.1", broker.port) as conn:
    state = run_capture(conn, source, symbols, clock=clock, max_polls=60)
    print(f"\n{state.polls} polls, {state.stored_batches} batches stored, "
          f"{state.failures} failures, {clock.elapsed:.0f}s of virtual time\n")
    series = bootstrap(conn, symbols)
    print(render(series, width=50, height=6))
