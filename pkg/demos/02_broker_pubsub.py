"""Start the in-process broker, store a point and fan it out to two subscribers."""

from quotecast.broker import MiniBroker
from quotecast.resp import connect

with MiniBroker("127.0.0.1", 0) as broker:
    subs = [connect("127.0.0.1", broker.port) for _ in range(2)]
    for s in subs:
        s.subscribe("ES=F")
    pub = connect("127.0.0.1", broker.port)
    payload = "1647381600;4261.75;-0.25;-0.0059;1200000"
    print("ZADD  ->", pub.command(["ZADD", "ES=F", 1647381600, payload]))
    print("PUBLISH reached", pub.command(["PUBLISH", "ES=F", payload]), "subscribers")
    for i, s in enumerate(subs):
        msg = s.listen(timeout=2.0)
        print(f"subscriber {i} got {msg.payload} on {msg.channel}")
    print("stored:", pub.command(["ZRANGE", "ES=F", 0, -1, "WITHSCORES"]))
    for c in subs + [pub]:
        c.close()
