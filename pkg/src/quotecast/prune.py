"""Retention pruning for the per-symbol sorted sets.

Meant to be run periodically (from cron, say). Points older than the age
limit are dropped, then the oldest points beyond the count limit. The
newest point of a symbol is always kept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

from .feed import DAY, format_number
from .resp import ErrorReply, ProtocolError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetentionPolicy:
    max_age: Optional[float] = 30 * DAY   # seconds; None disables
    max_points: int = 200_000             # 0 disables

    def __post_init__(self):
        if self.max_age is None and not self.max_points:
            raise ValueError("retention policy needs an age or a count limit")
        if self.max_age is not None and self.max_age < 0:
            raise ValueError("max_age must be non-negative")
        if self.max_points < 0:
            raise ValueError("max_points must be non-negative")


class PruneError(Exception):
    """Pruning stopped part way. ``completed`` maps finished symbols to counts."""

    def __init__(self, symbol: str, completed: dict, cause: Exception):
        super().__init__(f"pruning {symbol} failed: {cause}")
        self.symbol = symbol
        self.completed = completed
        self.cause = cause


def _int_reply(reply) -> int:
    if isinstance(reply, ErrorReply) or not isinstance(reply, int):
        raise ProtocolError(f"expected an integer reply, got {reply!r}")
    return reply


def _newest_score(conn, symbol: str) -> Optional[float]:
    reply = conn.command(["ZRANGE", symbol, -1, -1, "WITHSCORES"])
    if isinstance(reply, ErrorReply) or not isinstance(reply, list):
        raise ProtocolError(f"ZRANGE {symbol} returned {reply!r}")
    if not reply:
        return None
    return float(reply[1])


def prune_symbol(conn, symbol: str, policy: RetentionPolicy, now: float,
                 dry_run: bool = False) -> int:
    newest = _newest_score(conn, symbol)
    if newest is None:
        return 0
    removed = 0
    if policy.max_age is not None:
        cutoff = now - policy.max_age
        bound = "(" + format_number(cutoff)
        if newest < cutoff:
            # everything is stale: keep only the newest point
            total = _int_reply(conn.command(["ZCARD", symbol]))
            if dry_run:
                removed = total - 1
            else:
                removed = _int_reply(conn.command(["ZREMRANGEBYRANK", symbol, 0, -2]))
        elif dry_run:
            removed = _int_reply(conn.command(["ZCOUNT", symbol, "-inf", bound]))
        else:
            removed = _int_reply(conn.command(["ZREMRANGEBYSCORE", symbol, "-inf", bound]))
    if policy.max_points:
        total = _int_reply(conn.command(["ZCARD", symbol]))
        if dry_run:
            total -= removed
        excess = total - policy.max_points
        if excess > 0:
            if dry_run:
                removed += excess
            else:
                removed += _int_reply(conn.command(["ZREMRANGEBYRANK", symbol, 0, excess - 1]))
    return removed


def prune(conn, symbols: Iterable[str], policy: RetentionPolicy, now: float,
          dry_run: bool = False) -> dict[str, int]:
    """Apply ``policy`` to each symbol; return the number removed per symbol.

    With ``dry_run`` nothing is changed and the counts are what would go.
    """
    results: dict[str, int] = {}
    for symbol in symbols:
        try:
            results[symbol] = prune_symbol(conn, symbol, policy, now, dry_run)
        except (OSError, ProtocolError) as exc:
            raise PruneError(symbol, dict(results), exc) from exc
        log.info("%s %s %d", symbol, "would remove" if dry_run else "removed", results[symbol])
    return results
