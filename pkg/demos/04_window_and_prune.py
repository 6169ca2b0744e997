"""Trim a series to its busiest recent days, then prune old points from storage."""

import random

from quotecast.broker import MiniBroker
from quotecast.capture import store_and_publish
from quotecast.clock import iso_utc
from quotecast.feed import DAY, QuoteRecord
from quotecast.monitor import TimeSeries, most_recent_n_days
from quotecast.prune import RetentionPolicy, prune
from quotecast.resp import connect

rng = random.Random(4)
start = 19_000 * DAY
points = []
for day, count in enumerate([2000, 1600, 1800, 300]):
    for t in sorted(rng.sample(range(DAY), count)):
        points.append(QuoteRecord(start + day * DAY + t, 100.0, 0, 0, 0))
series = TimeSeries("ES=F", points)
window = most_recent_n_days(series, n=2, minobs=1500)
print(f"{len(series)} points, window keeps {len(window)} starting {iso_utc(window.times[0])}")

now = start + 40 * DAY
with MiniBroker("127.0.0.1", 0) as broker, connect("127.0.0.1", broker.port) as conn:
    for age_days in range(0, 40, 2):
        store_and_publish(conn, "ES=F", QuoteRecord(now - age_days * DAY, 1, 0, 0, 0))
    policy = RetentionPolicy(max_age=30 * DAY)
    print("dry run:", prune(conn, ["ES=F"], policy, now, dry_run=True))
    print("pruned: ", prune(conn, ["ES=F"], policy, now))
    print("again:  ", prune(conn, ["ES=F"], policy, now))
