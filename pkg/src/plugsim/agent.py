"""Agent runtime: configuration, bus client, heartbeats, callback dispatch.

Every concrete agent (device driver, control, historian, gateway, bridge) is
an Agent with bindings. An agent is a single logical execution context: its
handlers and heartbeat actions never run concurrently with each other.

Two clock modes exist. In realtime mode the agent runs its own dispatch and
heartbeat threads against the wall clock. In lockstep mode it runs no threads
of its own (beyond the socket reader); the simulation harness advances the
clock and calls fire_heartbeats / flush / drain explicitly, which makes every
run a pure function of the scenario.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from queue import Empty, Queue
from typing import Any, Callable

from .broker import default_bus_port
from .envelope import (
    FrameKind,
    InvalidTopic,
    MessageEnvelope,
    ProtocolError,
    decode_frame,
    encode_frame,
    topic_matches,
    valid_topic,
)
from .errors import ConfigInvalid, ConfigParse, PlugsimError

log = logging.getLogger(__name__)

INTERFACE_KINDS = (
    "virtual-device",
    "csv-replay",
    "cosim",
    "control",
    "dr",
    "historian",
    "bridge",
)

RECONNECT_BASE_S = 0.5
RECONNECT_CAP_S = 8.0
SEND_BUFFER_FRAMES = 1000


class BusUnreachable(PlugsimError):
    """Initial connection attempts to the broker were exhausted."""


class BusDisconnected(PlugsimError):
    """Send attempted on a client that was stopped."""


@dataclass
class AgentConfig:
    agent_id: str
    interface_kind: str
    bus_endpoint: str = ""
    heartbeat_s: float = 5.0
    device_endpoint: str | None = None
    point_map: dict[str, str] = field(default_factory=dict)
    params: dict[str, Any] = field(default_factory=dict)

    def bus_host_port(self) -> tuple[str, int]:
        if not self.bus_endpoint:
            return "127.0.0.1", default_bus_port()
        host, _, port = self.bus_endpoint.rpartition(":")
        return host or "127.0.0.1", int(port)


def load_agent_config(source: str | Path | dict[str, Any]) -> AgentConfig:
    """Build a validated AgentConfig from a JSON file path or an inline map."""
    if isinstance(source, (str, Path)):
        try:
            raw = Path(source).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigParse(f"cannot read {source}: {exc}") from exc
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigParse(f"{source}: {exc}") from exc
    else:
        obj = source
    if not isinstance(obj, dict):
        raise ConfigParse("agent config must be a map")

    agent_id = obj.get("agent_id")
    if not isinstance(agent_id, str) or not agent_id:
        raise ConfigInvalid("agent_id", "required non-empty string")
    kind = obj.get("interface_kind")
    if kind not in INTERFACE_KINDS:
        raise ConfigInvalid("interface_kind", f"{kind!r} not one of {INTERFACE_KINDS}")
    heartbeat_s = obj.get("heartbeat_s", 5)
    if not isinstance(heartbeat_s, (int, float)) or isinstance(heartbeat_s, bool) or heartbeat_s <= 0:
        raise ConfigInvalid("heartbeat_s", "must be a positive number")
    point_map = obj.get("point_map", {})
    if not isinstance(point_map, dict):
        raise ConfigInvalid("point_map", "must be a map of point name to topic")
    for name, topic in point_map.items():
        if not valid_topic(str(topic)):
            raise ConfigInvalid("point_map", f"point {name!r}: bad topic {topic!r}")
    params = obj.get("params", {})
    if not isinstance(params, dict):
        raise ConfigInvalid("params", "must be a map")
    bus_endpoint = obj.get("bus_endpoint", "")
    if bus_endpoint and ":" not in str(bus_endpoint):
        raise ConfigInvalid("bus_endpoint", "must be host:port")
    device_endpoint = obj.get("device_endpoint")

    return AgentConfig(
        agent_id=agent_id,
        interface_kind=kind,
        bus_endpoint=str(bus_endpoint),
        heartbeat_s=float(heartbeat_s),
        device_endpoint=device_endpoint,
        point_map={str(k): str(v) for k, v in point_map.items()},
        params=dict(params),
    )


@dataclass(frozen=True)
class CallbackBinding:
    pattern: str
    handler: Callable[[MessageEnvelope], None]

    def validate(self) -> None:
        if not valid_topic(self.pattern):
            raise InvalidTopic(f"binding pattern {self.pattern!r} violates topic grammar")


class Clock:
    """Source of 'now' for publishes, logs, and heartbeats.

    mode 'realtime' reads the wall clock; mode 'lockstep' reads a sim time
    that only the harness advances.
    """

    def __init__(self, mode: str = "realtime"):
        if mode not in ("realtime", "lockstep"):
            raise ValueError(f"unknown clock mode {mode!r}")
        self.mode = mode
        self.sim_t_s = 0.0

    def now_s(self) -> float:
        if self.mode == "lockstep":
            return self.sim_t_s
        return time.time()

    def now_ms(self) -> int:
        return int(self.now_s() * 1000)


class _BusClient:
    """One TCP connection to the broker with reconnect and send buffering."""

    def __init__(self, host: str, port: int, on_delivery: Callable[[MessageEnvelope], None],
                 owner: str, attempts: int = 12):
        self.host = host
        self.port = port
        self.owner = owner
        self.attempts = attempts
        self._on_delivery = on_delivery
        self._sock: socket.socket | None = None
        self._send_lock = threading.Lock()
        self._reader: threading.Thread | None = None
        self._stopping = threading.Event()
        self._patterns: set[str] = set()
        self._buffer: deque[bytes] = deque(maxlen=SEND_BUFFER_FRAMES)
        self.dropped_frames = 0
        self._pong_events: dict[str, threading.Event] = {}
        self._pong_lock = threading.Lock()
        self._reconnecting = threading.Event()

    def connect(self) -> None:
        delay = RECONNECT_BASE_S
        last: Exception | None = None
        for _ in range(self.attempts):
            try:
                self._open_socket()
                return
            except OSError as exc:
                last = exc
                time.sleep(delay)
                delay = min(delay * 2, RECONNECT_CAP_S)
        raise BusUnreachable(f"{self.owner}: broker at {self.host}:{self.port} unreachable: {last}")

    def _open_socket(self) -> None:
        sock = socket.create_connection((self.host, self.port), timeout=5.0)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        self._sock = sock
        reader = threading.Thread(target=self._read_loop, args=(sock,),
                                  name=f"{self.owner}-reader", daemon=True)
        reader.start()
        self._reader = reader
        for pattern in sorted(self._patterns):
            self._send_now(self._sub_frame(pattern))
        while self._buffer:
            self._send_now(self._buffer.popleft())

    def close(self) -> None:
        self._stopping.set()
        sock = self._sock
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)  # wake a reader blocked in recv
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass
        if self._reader is not None:
            self._reader.join(timeout=2.0)

    def _sub_frame(self, pattern: str) -> bytes:
        return encode_frame(MessageEnvelope(kind=FrameKind.SUB, sender=self.owner, pattern=pattern))

    def subscribe(self, pattern: str) -> None:
        if not valid_topic(pattern):
            raise InvalidTopic(f"pattern {pattern!r} violates topic grammar")
        self._patterns.add(pattern)
        self.send(self._sub_frame(pattern))

    def unsubscribe(self, pattern: str) -> None:
        self._patterns.discard(pattern)
        self.send(encode_frame(MessageEnvelope(kind=FrameKind.UNSUB, sender=self.owner, pattern=pattern)))

    def send(self, data: bytes) -> None:
        if self._stopping.is_set():
            raise BusDisconnected(f"{self.owner}: client stopped")
        with self._send_lock:
            if self._sock is None:
                self._buffer_frame(data)
                return
            try:
                self._sock.sendall(data)
            except OSError:
                self._buffer_frame(data)
                self._start_reconnect()

    def _send_now(self, data: bytes) -> None:
        assert self._sock is not None
        self._sock.sendall(data)

    def _buffer_frame(self, data: bytes) -> None:
        if len(self._buffer) == self._buffer.maxlen:
            self.dropped_frames += 1
        self._buffer.append(data)

    def _start_reconnect(self) -> None:
        if self._reconnecting.is_set() or self._stopping.is_set():
            return
        self._reconnecting.set()
        self._sock = None
        threading.Thread(target=self._reconnect_loop, name=f"{self.owner}-reconnect",
                         daemon=True).start()

    def _reconnect_loop(self) -> None:
        delay = RECONNECT_BASE_S
        while not self._stopping.is_set():
            try:
                with self._send_lock:
                    self._open_socket()
                break
            except OSError:
                time.sleep(delay)
                delay = min(delay * 2, RECONNECT_CAP_S)
        self._reconnecting.clear()

    def _read_loop(self, sock: socket.socket) -> None:
        buf = bytearray()
        while not self._stopping.is_set():
            try:
                chunk = sock.recv(65536)
            except OSError:
                break
            if not chunk:
                break
            buf.extend(chunk)
            while True:
                nl = buf.find(b"\n")
                if nl < 0:
                    break
                line = bytes(buf[: nl + 1])
                del buf[: nl + 1]
                try:
                    env = decode_frame(line)
                except ProtocolError as exc:
                    log.warning("%s: dropping bad inbound frame: %s", self.owner, exc)
                    continue
                if env.kind is FrameKind.PONG:
                    token = env.headers.get("token", "")
                    with self._pong_lock:
                        ev = self._pong_events.pop(token, None)
                    if ev is not None:
                        ev.set()
                elif env.kind is FrameKind.PUB:
                    self._on_delivery(env)
                elif env.kind is FrameKind.ERR:
                    log.warning("%s: broker ERR: %s %s", self.owner, env.headers, env.payload)
        if not self._stopping.is_set() and self._sock is sock:
            with self._send_lock:
                if self._sock is sock:
                    self._sock = None
            self._start_reconnect()

    def flush(self, token: str, timeout: float = 10.0) -> None:
        """Barrier: returns once the broker has routed everything this client
        sent before the barrier (PING echoed back as PONG)."""
        ev = threading.Event()
        with self._pong_lock:
            self._pong_events[token] = ev
        self.send(encode_frame(MessageEnvelope(kind=FrameKind.PING, sender=self.owner,
                                               headers={"token": token})))
        if not ev.wait(timeout):
            with self._pong_lock:
                self._pong_events.pop(token, None)
            raise TimeoutError(f"{self.owner}: no PONG for flush token {token} in {timeout}s")


class Agent:
    """A bus participant with bindings, heartbeats, and a serialized dispatch."""

    def __init__(self, cfg: AgentConfig, clock: Clock | None = None,
                 connect_attempts: int = 12):
        self.cfg = cfg
        self.agent_id = cfg.agent_id
        self.clock = clock or Clock("realtime")
        self.bindings: list[CallbackBinding] = []
        self._delivery_hooks: list[Callable[[MessageEnvelope], None]] = []
        self._heartbeats: list[tuple[float, Callable[[float], None]]] = []
        self._inbox: Queue[MessageEnvelope] = Queue()
        self._dispatch_lock = threading.RLock()
        self.hb_scale = 1.0  # wall seconds per sim second for realtime heartbeats
        self._next_token = 0
        self._hb_threads: list[threading.Thread] = []
        self._dispatch_thread: threading.Thread | None = None
        self._stopping = threading.Event()
        self.delivered = 0
        self.log_lines: deque[str] = deque(maxlen=1000)
        host, port = cfg.bus_host_port()
        self.client = _BusClient(host, port, self._inbox.put, cfg.agent_id,
                                 attempts=connect_attempts)
        self.started = False

    # -- wiring ----------------------------------------------------------

    def bind(self, pattern: str, handler: Callable[[MessageEnvelope], None]) -> None:
        binding = CallbackBinding(pattern=pattern, handler=handler)
        binding.validate()
        self.bindings.append(binding)
        if self.started:
            self.client.subscribe(pattern)

    def on_delivery(self, hook: Callable[[MessageEnvelope], None]) -> None:
        """Register a hook invoked once per delivered envelope (after bindings)."""
        self._delivery_hooks.append(hook)

    def subscribe(self, pattern: str) -> None:
        """Subscribe without a binding; deliveries reach on_delivery hooks only."""
        if self.started:
            self.client.subscribe(pattern)
        else:
            self.client._patterns.add(pattern)

    def heartbeat(self, period_s: float, action: Callable[[float], None]) -> None:
        if period_s <= 0:
            raise ValueError("heartbeat period must be positive")
        self._heartbeats.append((float(period_s), action))
        if self.started and self.clock.mode == "realtime":
            self._spawn_hb_thread(float(period_s), action)

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        self.client.connect()
        for binding in self.bindings:
            self.client.subscribe(binding.pattern)
        self.started = True
        # barrier: subscriptions must be registered before anyone publishes
        self.flush()
        if self.clock.mode == "realtime":
            self._dispatch_thread = threading.Thread(
                target=self._dispatch_loop, name=f"{self.agent_id}-dispatch", daemon=True)
            self._dispatch_thread.start()
            for period_s, action in self._heartbeats:
                self._spawn_hb_thread(period_s, action)
        self.log("INFO", "started")

    def stop(self) -> None:
        self._stopping.set()
        self.client.close()
        if self._dispatch_thread is not None:
            self._inbox.put(None)  # type: ignore[arg-type]
            self._dispatch_thread.join(timeout=2.0)
        for t in self._hb_threads:
            t.join(timeout=2.0)

    # -- publishing ----------------------------------------------------------

    def publish(self, topic: str, payload: Any, headers: dict[str, str] | None = None,
                ts_ms: int | None = None) -> None:
        if not valid_topic(topic):
            raise InvalidTopic(f"topic {topic!r} violates topic grammar")
        env = MessageEnvelope(
            kind=FrameKind.PUB,
            sender=self.agent_id,
            ts_ms=self.clock.now_ms() if ts_ms is None else ts_ms,
            topic=topic,
            headers=headers or {},
            payload=payload,
        )
        self.client.send(encode_frame(env))
        if self.clock.mode == "lockstep":
            self.flush()

    def publish_point(self, point: str, payload: Any,
                      headers: dict[str, str] | None = None) -> None:
        topic = self.cfg.point_map.get(point)
        if topic is None:
            raise ConfigInvalid("point_map", f"no topic for point {point!r}")
        self.publish(topic, payload, headers)

    def flush(self, timeout: float = 10.0) -> None:
        self._next_token += 1
        self.client.flush(f"{self.agent_id}-{self._next_token}", timeout)

    # -- dispatch ---------------------------------------------------------

    def _dispatch_one(self, env: MessageEnvelope) -> None:
        assert env.topic is not None
        with self._dispatch_lock:
            self.delivered += 1
            for binding in self.bindings:
                if topic_matches(binding.pattern, env.topic):
                    try:
                        binding.handler(env)
                    except Exception as exc:  # noqa: BLE001 - handler faults stay local
                        self.log("ERROR", f"handler for {binding.pattern} failed: {exc!r}")
            for hook in self._delivery_hooks:
                try:
                    hook(env)
                except Exception as exc:  # noqa: BLE001
                    self.log("ERROR", f"delivery hook failed: {exc!r}")

    def _dispatch_loop(self) -> None:
        while not self._stopping.is_set():
            env = self._inbox.get()
            if env is None:
                break
            self._dispatch_one(env)

    def drain(self, topics_out: list[str] | None = None) -> int:
        """Lockstep: synchronously dispatch everything currently queued."""
        n = 0
        while True:
            try:
                env = self._inbox.get_nowait()
            except Empty:
                return n
            if env is None:
                continue
            if topics_out is not None and env.topic is not None:
                topics_out.append(env.topic)
            self._dispatch_one(env)
            n += 1

    def pending(self) -> int:
        return self._inbox.qsize()

    # -- heartbeats -----------------------------------------------------------

    def fire_heartbeats(self, t_s: float) -> int:
        """Lockstep: run every action whose period divides t_s; returns count."""
        fired = 0
        with self._dispatch_lock:
            for period_s, action in self._heartbeats:
                if (t_s % period_s) == 0:
                    fired += 1
                    try:
                        action(t_s)
                    except Exception as exc:  # noqa: BLE001
                        self.log("ERROR", f"heartbeat action failed at t={t_s}: {exc!r}")
        return fired

    def _spawn_hb_thread(self, period_s: float, action: Callable[[float], None]) -> None:
        def run() -> None:
            start = time.monotonic()
            k = 0
            while not self._stopping.is_set():
                with self._dispatch_lock:
                    try:
                        action(k * period_s)
                    except Exception as exc:  # noqa: BLE001
                        self.log("ERROR", f"heartbeat action failed: {exc!r}")
                k += 1
                target = start + k * period_s * self.hb_scale
                while not self._stopping.is_set():
                    remaining = target - time.monotonic()
                    if remaining <= 0:
                        break
                    time.sleep(min(remaining, 0.2))

        t = threading.Thread(target=run, name=f"{self.agent_id}-hb", daemon=True)
        t.start()
        self._hb_threads.append(t)

    # -- logging ------------------------------------------------------------

    def log(self, level: str, message: str) -> None:
        line = f"{self.clock.now_ms()} {level} {self.agent_id} {message}"
        self.log_lines.append(line)
        log.log(getattr(logging, level, logging.INFO), "%s", line)
