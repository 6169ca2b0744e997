"""Record reference replies for the broker equivalence tests.

Generates seeded multi-connection command scripts and runs them against a
real Redis server, saving the raw bytes every connection received after
each step. The tests replay the same scripts against the mini broker.

    python tests/fixtures/record_broker_script.py --port 6399

Needs a Redis 6.2 server listening on the given port (the recorded
fixtures came from redis-server 6.2.14 with default settings).
"""

import argparse
import json
import random
import select
import socket
import time
from pathlib import Path

HERE = Path(__file__).parent

KEYS = ["k0", "k1", "k2"]
MEMBERS = [f"m{i}" for i in range(8)]
SCORES = ["1", "2", "3", "-1", "0", "1.5", "2.5", "10", "1e3", "-inf", "+inf",
          "inf", "100", "7", "0.25", "-0", "1647381600"]
BAD_SCORES = ["abc", "nan", "1e400", " 1", ""]
BOUNDS = ["-inf", "+inf", "0", "1", "(1", "2", "(2.5", "5", "10", "1e3", "(", "(-inf"]
BAD_BOUNDS = ["foo", "nan", "1x"]
INDICES = ["0", "1", "2", "3", "-1", "-2", "-3", "10", "-10"]
BAD_INDICES = ["x", "01", "+1", "-0", "1.5"]
CHANNELS = ["ch0", "ch1"]


def encode(parts):
    out = [b"*%d\r\n" % len(parts)]
    for p in parts:
        b = p.encode()
        out.append(b"$%d\r\n%s\r\n" % (len(b), b))
    return b"".join(out)


class ScriptGen:
    def __init__(self, seed, extended=False):
        self.rng = random.Random(seed)
        self.extended = extended
        self.subs = [set(), set(), set()]
        self.npayload = 0

    def score(self):
        r = self.rng
        return r.choice(BAD_SCORES) if r.random() < 0.08 else r.choice(SCORES)

    def bound(self):
        r = self.rng
        return r.choice(BAD_BOUNDS) if r.random() < 0.08 else r.choice(BOUNDS)

    def index(self):
        r = self.rng
        return r.choice(BAD_INDICES) if r.random() < 0.08 else r.choice(INDICES)

    def data_command(self):
        r = self.rng
        names = ["ZADD"] * 5 + ["ZRANGE"] * 3 + ["ZREMRANGEBYSCORE"] * 2 + \
                ["ZCARD", "DEL", "PING"] + ["PUBLISH"] * 4
        if self.extended:
            names += ["ZCOUNT", "ZREMRANGEBYRANK", "ZRANGE_WS", "ZADD_FLAGS"] * 2
        name = r.choice(names)
        key = r.choice(KEYS)
        if name == "ZADD":
            parts = ["ZADD", key]
            for _ in range(r.choice([1, 1, 1, 2, 3])):
                parts += [self.score(), r.choice(MEMBERS)]
            if r.random() < 0.04:
                parts = parts[:-1]  # odd argument count
            if r.random() < 0.03:
                parts = parts[:2]  # too few arguments
            return parts
        if name == "ZADD_FLAGS":
            flags = r.sample(["NX", "XX", "CH", "GT", "LT"], r.choice([1, 1, 2]))
            return ["ZADD", key, *flags, self.score(), r.choice(MEMBERS)]
        if name == "ZRANGE":
            return ["ZRANGE", key, self.index(), self.index()]
        if name == "ZRANGE_WS":
            return ["ZRANGE", key, self.index(), self.index(), "WITHSCORES"]
        if name == "ZREMRANGEBYSCORE":
            return ["ZREMRANGEBYSCORE", key, self.bound(), self.bound()]
        if name == "ZCOUNT":
            return ["ZCOUNT", key, self.bound(), self.bound()]
        if name == "ZREMRANGEBYRANK":
            return ["ZREMRANGEBYRANK", key, self.index(), self.index()]
        if name == "ZCARD":
            return ["ZCARD", key]
        if name == "DEL":
            return ["DEL", *r.sample(KEYS, r.choice([1, 2]))]
        if name == "PING":
            return ["PING"] if r.random() < 0.7 else ["PING", "hello"]
        self.npayload += 1
        return ["PUBLISH", r.choice(CHANNELS), f"{1647381600 + self.npayload};4261.75;-0.25;-0.0059;{self.npayload}"]

    def pubsub_command(self, conn):
        r = self.rng
        subs = self.subs[conn]
        choice = r.random()
        if choice < 0.45:
            chans = r.sample(CHANNELS, r.choice([1, 1, 2]))
            subs.update(chans)
            return ["SUBSCRIBE", *chans]
        if choice < 0.75:
            if len(subs) <= 1 and r.random() < 0.3:
                subs.clear()
                return ["UNSUBSCRIBE"]
            chan = r.choice(CHANNELS)
            subs.discard(chan)
            return ["UNSUBSCRIBE", chan]
        return ["PING"] if r.random() < 0.5 else ["PING", "x"]

    def step(self):
        r = self.rng
        conn = r.choices([0, 1, 2], weights=[6, 2, 2])[0]
        if conn == 0:
            return conn, self.data_command()
        if self.subs[conn]:
            if r.random() < 0.2:
                return conn, self.data_command()  # rejected while subscribed
            return conn, self.pubsub_command(conn)
        if r.random() < 0.6:
            return conn, self.pubsub_command(conn)
        return conn, self.data_command()

    def script(self, n):
        return [self.step() for _ in range(n)]


def record(port, script, quiet=0.03):
    socks = [socket.create_connection(("127.0.0.1", port)) for _ in range(3)]
    socks[0].sendall(encode(["FLUSHALL"]))
    socks[0].recv(100)
    steps = []
    for conn, parts in script:
        socks[conn].sendall(encode(parts))
        got = {i: b"" for i in range(3)}
        deadline = time.time() + 2.0
        while time.time() < deadline:
            ready, _, _ = select.select(socks, [], [], quiet)
            if not ready:
                if got[conn]:
                    break
                continue
            for s in ready:
                got[socks.index(s)] += s.recv(65536)
        steps.append({"conn": conn, "command": parts,
                      "received": {str(i): b.decode("latin-1") for i, b in got.items() if b}})
    for s in socks:
        s.close()
    return steps


def server_version(port):
    s = socket.create_connection(("127.0.0.1", port))
    s.sendall(encode(["INFO", "server"]))
    time.sleep(0.1)
    info = s.recv(65536).decode()
    s.close()
    for line in info.splitlines():
        if line.startswith("redis_version:"):
            return line.split(":", 1)[1].strip()
    return "unknown"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--port", type=int, default=6399)
    args = ap.parse_args()
    version = server_version(args.port)
    for name, seed, n, extended in [("broker_script.json", 20220315, 500, False),
                                    ("broker_script_extended.json", 4261, 200, True)]:
        script = ScriptGen(seed, extended).script(n)
        steps = record(args.port, script)
        doc = {"server": f"redis {version}", "seed": seed, "connections": 3, "steps": steps}
        (HERE / name).write_text(json.dumps(doc, indent=1) + "\n")
        print(f"wrote {name}: {len(steps)} steps")


if __name__ == "__main__":
    main()
