"""Shared fixtures: a live broker on an ephemeral port and agent factories."""

import json
import socket

import pytest

from plugsim.agent import Agent, AgentConfig, Clock
from plugsim.broker import Broker


@pytest.fixture()
def broker():
    b = Broker(port=0)
    b.start()
    yield b
    b.stop()


@pytest.fixture()
def lockstep_clock():
    return Clock("lockstep")


@pytest.fixture()
def make_agent(broker, lockstep_clock):
    """Factory for started lockstep agents on the shared broker."""
    agents = []

    def _make(agent_id: str, kind: str = "virtual-device", clock: Clock | None = None,
              heartbeat_s: float = 60.0, start: bool = True) -> Agent:
        cfg = AgentConfig(
            agent_id=agent_id,
            interface_kind=kind,
            bus_endpoint=f"127.0.0.1:{broker.port}",
            heartbeat_s=heartbeat_s,
        )
        agent = Agent(cfg, clock or lockstep_clock)
        agents.append(agent)
        if start:
            agent.start()
        return agent

    yield _make
    for agent in agents:
        agent.stop()


class RawConn:
    """Line-oriented raw socket for poking the broker below the Agent layer."""

    def __init__(self, port: int, host: str = "127.0.0.1"):
        self.sock = socket.create_connection((host, port), timeout=5.0)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._buf = bytearray()

    def send_line(self, line: bytes | str) -> None:
        data = line.encode() if isinstance(line, str) else line
        if not data.endswith(b"\n"):
            data += b"\n"
        self.sock.sendall(data)

    def send_raw(self, data: bytes) -> None:
        self.sock.sendall(data)

    def recv_line(self, timeout: float = 5.0) -> bytes:
        self.sock.settimeout(timeout)
        while b"\n" not in self._buf:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ConnectionError("broker closed the connection")
            self._buf.extend(chunk)
        nl = self._buf.find(b"\n")
        line = bytes(self._buf[: nl + 1])
        del self._buf[: nl + 1]
        return line

    def recv_json(self, timeout: float = 5.0) -> dict:
        return json.loads(self.recv_line(timeout))

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


@pytest.fixture()
def raw_conn(broker):
    conns = []

    def _make() -> RawConn:
        c = RawConn(broker.port)
        conns.append(c)
        return c

    yield _make
    for c in conns:
        c.close()


def write_scenario(tmp_path, obj, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return path
