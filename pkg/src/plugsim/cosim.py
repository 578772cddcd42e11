"""Gateway between an external timestep simulator and the bus.

The external side speaks a newline-delimited frame protocol over local TCP:
HELLO(contract) / HELLO_ACK, then STEP(t, outputs) -> CONTROL(t, inputs) each
timestep, terminated by END or close. FAULT carries a reason and ends the
session. A reference stub simulator (one thermal zone) drives the protocol
for tests and the CLI.
"""

from __future__ import annotations

import json
import logging
import math
import os
import socket
import threading
from dataclasses import dataclass, field
from typing import Any

from .agent import Agent
from .errors import ConfigInvalid, PlugsimError

log = logging.getLogger(__name__)

DEFAULT_COSIM_PORT = 9923
COSIM_PORT_ENV = "PLUGSIM_COSIM_PORT"

COSIM_KINDS = ("HELLO", "HELLO_ACK", "STEP", "CONTROL", "END", "FAULT")
T_TOLERANCE = 1e-6


def default_cosim_port() -> int:
    raw = os.environ.get(COSIM_PORT_ENV)
    if raw:
        return int(raw)
    return DEFAULT_COSIM_PORT


class CosimFault(PlugsimError):
    """Protocol violation on either side of a session."""


@dataclass(frozen=True)
class CosimContract:
    sim_id: str
    outputs: tuple[str, ...]
    inputs: tuple[str, ...]
    timestep_s: float

    def __post_init__(self):
        if not self.sim_id:
            raise ConfigInvalid("sim_id", "required")
        if not self.outputs or len(set(self.outputs)) != len(self.outputs):
            raise ConfigInvalid("outputs", "non-empty, no duplicates")
        if not self.inputs or len(set(self.inputs)) != len(self.inputs):
            raise ConfigInvalid("inputs", "non-empty, no duplicates")
        if self.timestep_s <= 0:
            raise ConfigInvalid("timestep_s", "must be positive")


def encode_cosim_frame(kind: str, t: float | None = None,
                       values: dict[str, float] | None = None,
                       contract: CosimContract | None = None,
                       reason: str | None = None) -> bytes:
    if kind not in COSIM_KINDS:
        raise CosimFault(f"unknown frame kind {kind!r}")
    obj: dict[str, Any] = {"kind": kind}
    if t is not None:
        obj["t"] = t
    if values is not None:
        obj["values"] = values
    if contract is not None:
        obj["contract"] = {
            "sim_id": contract.sim_id,
            "outputs": list(contract.outputs),
            "inputs": list(contract.inputs),
            "timestep_s": contract.timestep_s,
        }
    if reason is not None:
        obj["reason"] = reason
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")


def decode_cosim_frame(line: bytes) -> dict[str, Any]:
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CosimFault(f"malformed frame: {exc}") from exc
    if not isinstance(obj, dict) or obj.get("kind") not in COSIM_KINDS:
        raise CosimFault(f"malformed frame: bad kind in {obj!r}")
    return obj


def _read_lines(sock: socket.socket):
    buf = bytearray()
    while True:
        chunk = sock.recv(65536)
        if not chunk:
            return
        buf.extend(chunk)
        while True:
            nl = buf.find(b"\n")
            if nl < 0:
                break
            line = bytes(buf[: nl + 1])
            del buf[: nl + 1]
            yield line


@dataclass
class SessionStats:
    steps: int = 0
    controls: int = 0
    published: int = 0
    faults: list[str] = field(default_factory=list)
    clean: bool = False


class CosimGateway:
    """Bridges one external session at a time onto the bus.

    The gateway's bus agent caches the latest value seen on each mapped input
    topic; every CONTROL carries all declared inputs, falling back to
    configured defaults for inputs never published.
    """

    def __init__(self, agent: Agent, output_topic_map: dict[str, str],
                 input_topic_map: dict[str, str],
                 input_defaults: dict[str, float] | None = None,
                 host: str = "127.0.0.1", port: int | None = None):
        self.agent = agent
        self.output_topic_map = dict(output_topic_map)
        self.input_topic_map = dict(input_topic_map)
        self.input_defaults = dict(input_defaults or {})
        self.host = host
        self.port = default_cosim_port() if port is None else port
        self._listener: socket.socket | None = None
        self._thread: threading.Thread | None = None
        self._stopping = threading.Event()
        self._cache: dict[str, float] = {}
        self._cache_lock = threading.Lock()
        self.last_session: SessionStats | None = None
        agent.on_delivery(self._on_input)

    def _on_input(self, env) -> None:
        var = self.input_topic_map.get(env.topic)
        if var is None:
            return
        if isinstance(env.payload, (int, float)) and not isinstance(env.payload, bool):
            with self._cache_lock:
                self._cache[var] = float(env.payload)

    def start(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.host, self.port))
        sock.listen(1)
        self.port = sock.getsockname()[1]
        self._listener = sock
        self._thread = threading.Thread(target=self._accept_loop, name="cosim-gateway",
                                        daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.shutdown(socket.SHUT_RDWR)  # wake accept()
            except OSError:
                pass
            try:
                self._listener.close()
            except OSError:
                pass
        if self._thread is not None:
            self._thread.join(timeout=2.0)

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stopping.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            try:
                self.last_session = self._serve_session(conn)
            finally:
                try:
                    conn.close()
                except OSError:
                    pass

    def _fault(self, conn: socket.socket, stats: SessionStats, reason: str) -> None:
        stats.faults.append(reason)
        try:
            conn.sendall(encode_cosim_frame("FAULT", reason=reason))
        except OSError:
            pass

    def _serve_session(self, conn: socket.socket) -> SessionStats:
        stats = SessionStats()
        lines = _read_lines(conn)
        contract: CosimContract | None = None
        subscribed: list[str] = []
        prev_t: float | None = None
        try:
            for line in lines:
                try:
                    frame = decode_cosim_frame(line)
                except CosimFault as exc:
                    self._fault(conn, stats, str(exc))
                    return stats
                kind = frame["kind"]

                if contract is None:
                    if kind != "HELLO":
                        self._fault(conn, stats, f"expected HELLO, got {kind}")
                        return stats
                    try:
                        raw = frame.get("contract") or {}
                        contract = CosimContract(
                            sim_id=str(raw.get("sim_id", "")),
                            outputs=tuple(raw.get("outputs", [])),
                            inputs=tuple(raw.get("inputs", [])),
                            timestep_s=float(raw.get("timestep_s", 0)),
                        )
                    except (ConfigInvalid, TypeError, ValueError) as exc:
                        self._fault(conn, stats, f"bad contract: {exc}")
                        return stats
                    unknown_out = [v for v in contract.outputs if v not in self.output_topic_map]
                    unknown_in = [v for v in contract.inputs if v not in self.input_topic_map.values()]
                    if unknown_out:
                        self._fault(conn, stats, f"unknown output {unknown_out[0]}")
                        return stats
                    if unknown_in:
                        self._fault(conn, stats, f"unknown input {unknown_in[0]}")
                        return stats
                    for topic, var in self.input_topic_map.items():
                        if var in contract.inputs:
                            self.agent.subscribe(topic)
                            subscribed.append(topic)
                    conn.sendall(encode_cosim_frame("HELLO_ACK"))
                    continue

                if kind == "END":
                    stats.clean = True
                    return stats
                if kind != "STEP":
                    self._fault(conn, stats, f"unexpected {kind} mid-session")
                    return stats

                t = frame.get("t")
                if not isinstance(t, (int, float)) or isinstance(t, bool):
                    self._fault(conn, stats, "STEP without numeric t")
                    return stats
                if prev_t is not None and abs(t - (prev_t + contract.timestep_s)) > T_TOLERANCE:
                    self._fault(conn, stats,
                                f"out-of-order t {t} (expected {prev_t + contract.timestep_s})")
                    return stats
                prev_t = float(t)

                values = frame.get("values") or {}
                bad = [k for k in values if k not in contract.outputs]
                if bad:
                    self._fault(conn, stats, f"unknown output {bad[0]}")
                    return stats
                stats.steps += 1
                for var, value in values.items():
                    self.agent.publish(
                        self.output_topic_map[var], value,
                        headers={"sim_id": contract.sim_id, "t": repr(float(t))},
                    )
                    stats.published += 1

                # pick up any control publishes routed before this moment
                self.agent.flush()
                self.agent.drain()
                with self._cache_lock:
                    control = {
                        var: self._cache.get(var, self.input_defaults.get(var, 0.0))
                        for var in contract.inputs
                    }
                conn.sendall(encode_cosim_frame("CONTROL", t=float(t), values=control))
                stats.controls += 1
            return stats  # peer closed without END; still a clean teardown
        except OSError as exc:
            stats.faults.append(f"socket error: {exc}")
            return stats
        finally:
            for topic in subscribed:
                try:
                    self.agent.client.unsubscribe(topic)
                except PlugsimError:
                    pass


# --------------------------------------------------------------------------
# reference stub: one thermal zone with proportional cooling


@dataclass(frozen=True)
class ZoneParams:
    C: float = 1.0e7     # J/K
    UA: float = 200.0    # W/K to outdoors
    K: float = 800.0     # W/K cooling gain above setpoint
    T_out: float = 30.0
    T0: float = 30.0


def step_zone(T: float, setpoint: float, dt: float, p: ZoneParams) -> float:
    return T + dt / p.C * (p.UA * (p.T_out - T) - p.K * max(0.0, T - setpoint))


def zone_fixed_point(p: ZoneParams, setpoint: float) -> float:
    """Equilibrium of the zone under active cooling (T* above setpoint)."""
    T_star = (p.UA * p.T_out + p.K * setpoint) / (p.UA + p.K)
    return T_star if T_star >= setpoint else min(p.T_out, setpoint)


class StubZoneSimulator:
    """External-side reference implementation driving a gateway session."""

    def __init__(self, host: str = "127.0.0.1", port: int | None = None,
                 sim_id: str = "zone1", timestep_s: float = 60.0,
                 n_steps: int = 1440, params: ZoneParams = ZoneParams(),
                 output_var: str = "zone_T", input_var: str = "cool_setpoint"):
        self.host = host
        self.port = default_cosim_port() if port is None else port
        self.contract = CosimContract(
            sim_id=sim_id, outputs=(output_var,), inputs=(input_var,),
            timestep_s=timestep_s)
        self.n_steps = n_steps
        self.params = params
        self.output_var = output_var
        self.input_var = input_var
        self.trace: list[tuple[float, float, float]] = []

    def run(self) -> list[tuple[float, float, float]]:
        """Drives the whole session; returns [(t, T_before_step, setpoint)]."""
        with socket.create_connection((self.host, self.port), timeout=10.0) as sock:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            lines = _read_lines(sock)
            sock.sendall(encode_cosim_frame("HELLO", contract=self.contract))
            ack = decode_cosim_frame(next(lines))
            if ack["kind"] == "FAULT":
                raise CosimFault(ack.get("reason", "gateway fault"))
            if ack["kind"] != "HELLO_ACK":
                raise CosimFault(f"expected HELLO_ACK, got {ack['kind']}")
            T = self.params.T0
            dt = self.contract.timestep_s
            for k in range(self.n_steps):
                t = k * dt
                sock.sendall(encode_cosim_frame("STEP", t=t, values={self.output_var: T}))
                reply = decode_cosim_frame(next(lines))
                if reply["kind"] == "FAULT":
                    raise CosimFault(reply.get("reason", "gateway fault"))
                if reply["kind"] != "CONTROL":
                    raise CosimFault(f"expected CONTROL, got {reply['kind']}")
                setpoint = float(reply["values"][self.input_var])
                if not math.isfinite(setpoint):
                    raise CosimFault("non-finite setpoint")
                self.trace.append((t, T, setpoint))
                T = step_zone(T, setpoint, dt, self.params)
            sock.sendall(encode_cosim_frame("END"))
        return self.trace
