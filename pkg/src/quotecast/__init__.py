"""Market-quote capture and distribution over a RESP2 broker."""

__version__ = "0.1.0"

from .capture import CaptureState, encode_payload, run_capture, store_and_publish
from .clock import SystemClock, VirtualClock
from .feed import (FaultInjectingSource, QuoteRecord, ReplaySource, SourceError,
                   SymbolSet, SyntheticSource, poll)
from .monitor import (CallbackRegistry, TimeSeries, append_dedup, decode_payload,
                      get_all_data, monitor_channels, most_recent_n_days, render,
                      run_monitor)
from .prune import RetentionPolicy, prune
from .resp import connect

__all__ = [
    "CallbackRegistry", "CaptureState", "FaultInjectingSource", "QuoteRecord",
    "ReplaySource", "RetentionPolicy", "SourceError", "SymbolSet", "SyntheticSource",
    "SystemClock", "TimeSeries", "VirtualClock", "append_dedup", "connect",
    "decode_payload", "encode_payload", "get_all_data", "monitor_channels",
    "most_recent_n_days", "poll", "prune", "render", "run_capture", "run_monitor",
    "store_and_publish",
]
