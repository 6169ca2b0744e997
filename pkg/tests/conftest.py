import json
import select
import socket
from pathlib import Path

import pytest

from quotecast.broker import MiniBroker
from quotecast.resp import connect, encode_command

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def broker():
    with MiniBroker("127.0.0.1", 0) as b:
        yield b


@pytest.fixture
def client(broker):
    conns = []

    def make(timeout=5.0):
        c = connect("127.0.0.1", broker.port, timeout=timeout)
        conns.append(c)
        return c

    yield make
    for c in conns:
        c.close()


def load_script(name):
    return json.loads((FIXTURES / name).read_text())


def replay_script(port, doc):
    """Run a recorded script against a server; return a list of mismatches."""
    socks = [socket.create_connection(("127.0.0.1", port)) for _ in range(doc["connections"])]
    for s in socks:
        s.settimeout(5.0)
    mismatches = []
    try:
        for n, step in enumerate(doc["steps"]):
            socks[step["conn"]].sendall(encode_command(step["command"]))
            expected = {int(k): v.encode("latin-1") for k, v in step["received"].items()}
            for i, want in expected.items():
                got = b""
                while len(got) < len(want):
                    chunk = socks[i].recv(len(want) - len(got))
                    if not chunk:
                        break
                    got += chunk
                if got != want:
                    mismatches.append((n, step["command"], i, want, got))
            ready, _, _ = select.select(socks, [], [], 0.0)
            for s in ready:
                extra = s.recv(65536)
                mismatches.append((n, step["command"], socks.index(s), b"", extra))
        ready, _, _ = select.select(socks, [], [], 0.2)
        for s in ready:
            mismatches.append(("end", None, socks.index(s), b"", s.recv(65536)))
    finally:
        for s in socks:
            s.close()
    return mismatches


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_" in nodeid and rep.when == "call":
                name = nodeid.split("::test_")[1]
                lines.append((int(name.split("_")[0]), name, outcome))
    if lines:
        terminalreporter.section("acceptance criteria")
        for n, name, outcome in sorted(lines):
            terminalreporter.write_line(f"criterion {n}: {'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
