"""TCP message broker: topic pub/sub over newline-delimited frames.

One reader thread per connection feeds a single routing path guarded by a
global lock, so routing for a publish is atomic with respect to subscription
changes. Deliveries go out through per-connection FIFO queues drained by
writer threads; order per (publisher, subscriber) pair therefore equals
publication order, and a PONG enqueued after a publish can never overtake it.
"""

from __future__ import annotations

import logging
import os
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

from .envelope import (
    MAX_FRAME_BYTES,
    FrameKind,
    MessageEnvelope,
    ProtocolError,
    Subscription,
    decode_frame,
    encode_frame,
    error_label,
    topic_matches,
)
from .errors import PlugsimError

log = logging.getLogger(__name__)

DEFAULT_BUS_PORT = 22916
BUS_PORT_ENV = "PLUGSIM_BUS_PORT"


def default_bus_port() -> int:
    raw = os.environ.get(BUS_PORT_ENV)
    if raw:
        return int(raw)
    return DEFAULT_BUS_PORT


class AddressInUse(PlugsimError):
    """The requested listen port is already bound."""


_CLOSE = object()


@dataclass
class _Conn:
    """Per-connection state; outbound frames pass through a FIFO queue."""

    key: str
    sock: socket.socket
    outbox: "queue.Queue[object]" = field(default_factory=queue.Queue)
    patterns: set[str] = field(default_factory=set)
    closed: bool = False


class Broker:
    """Serves the exchange bus on a TCP port until stop() is called."""

    def __init__(self, host: str = "127.0.0.1", port: int | None = None):
        self.host = host
        self.port = default_bus_port() if port is None else port
        self._listener: socket.socket | None = None
        self._lock = threading.Lock()
        self._conns: dict[str, _Conn] = {}
        self._next_conn = 0
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()
        self.stats = {"published": 0, "delivered": 0, "errors": 0}

    # -- lifecycle -----------------------------------------------------

    def start(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.host, self.port))
        except OSError as exc:
            sock.close()
            raise AddressInUse(f"cannot bind {self.host}:{self.port}: {exc}") from exc
        sock.listen(128)
        self.port = sock.getsockname()[1]
        self._listener = sock
        t = threading.Thread(target=self._accept_loop, name="broker-accept", daemon=True)
        t.start()
        self._threads.append(t)
        log.info("broker listening on %s:%d", self.host, self.port)

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
        with self._lock:
            conns = list(self._conns.values())
        for conn in conns:
            self._drop_conn(conn)
        for t in self._threads:
            t.join(timeout=2.0)

    def __enter__(self) -> "Broker":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- accept / read loops -------------------------------------------

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stopping.is_set():
            try:
                client, addr = self._listener.accept()
            except OSError:
                break
            client.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._next_conn += 1
                key = f"conn-{self._next_conn}"
                conn = _Conn(key=key, sock=client)
                self._conns[key] = conn
            log.debug("accepted %s from %s", key, addr)
            rt = threading.Thread(target=self._read_loop, args=(conn,), daemon=True)
            wt = threading.Thread(target=self._write_loop, args=(conn,), daemon=True)
            rt.start()
            wt.start()
            self._threads.extend([rt, wt])

    def _read_loop(self, conn: _Conn) -> None:
        buf = bytearray()
        sock = conn.sock
        overflow = False
        try:
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
                        if len(buf) > MAX_FRAME_BYTES:
                            # discard until resync at the next newline
                            if not overflow:
                                overflow = True
                                self._send_err(conn, "MalformedFrame", "frame exceeds 1 MiB")
                            del buf[:]
                        break
                    line = bytes(buf[: nl + 1])
                    del buf[: nl + 1]
                    if overflow:
                        overflow = False  # tail of the oversize frame; swallow it
                        continue
                    if len(line) > MAX_FRAME_BYTES:
                        self._send_err(conn, "MalformedFrame", "frame exceeds 1 MiB")
                        continue
                    self._handle_line(conn, line)
        finally:
            self._drop_conn(conn)

    def _write_loop(self, conn: _Conn) -> None:
        while True:
            item = conn.outbox.get()
            if item is _CLOSE:
                break
            try:
                conn.sock.sendall(item)  # type: ignore[arg-type]
            except OSError:
                break
        try:
            conn.sock.shutdown(socket.SHUT_RDWR)  # wake the paired read loop
        except OSError:
            pass
        try:
            conn.sock.close()
        except OSError:
            pass

    # -- frame handling -------------------------------------------------

    def _handle_line(self, conn: _Conn, line: bytes) -> None:
        try:
            env = decode_frame(line)
        except ProtocolError as exc:
            self._send_err(conn, error_label(exc), str(exc))
            return
        kind = env.kind
        if kind is FrameKind.PUB:
            self._handle_pub(conn, env, line)
        elif kind is FrameKind.SUB:
            with self._lock:
                conn.patterns.add(env.pattern)  # type: ignore[arg-type]
        elif kind is FrameKind.UNSUB:
            with self._lock:
                conn.patterns.discard(env.pattern)  # type: ignore[arg-type]
        elif kind is FrameKind.PING:
            pong = MessageEnvelope(
                kind=FrameKind.PONG,
                sender="broker",
                ts_ms=int(time.time() * 1000),
                headers=dict(env.headers),
            )
            with self._lock:
                self._enqueue(conn, encode_frame(pong))
        else:
            log.debug("ignoring inbound %s frame from %s", kind.value, conn.key)

    def _handle_pub(self, conn: _Conn, env: MessageEnvelope, line: bytes) -> None:
        assert env.topic is not None
        with self._lock:
            self.stats["published"] += 1
            for other in self._conns.values():
                if other.closed:
                    continue
                if any(topic_matches(p, env.topic) for p in other.patterns):
                    self._enqueue(other, line)
                    self.stats["delivered"] += 1

    def _enqueue(self, conn: _Conn, data: bytes) -> None:
        if not conn.closed:
            conn.outbox.put(data)

    def _send_err(self, conn: _Conn, error: str, detail: str) -> None:
        self.stats["errors"] += 1
        err = MessageEnvelope(
            kind=FrameKind.ERR,
            sender="broker",
            ts_ms=int(time.time() * 1000),
            headers={"error": error},
            payload=detail,
        )
        with self._lock:
            self._enqueue(conn, encode_frame(err))

    def _drop_conn(self, conn: _Conn) -> None:
        with self._lock:
            if conn.closed:
                return
            conn.closed = True
            conn.patterns.clear()
            self._conns.pop(conn.key, None)
        conn.outbox.put(_CLOSE)
        try:
            conn.sock.shutdown(socket.SHUT_RD)
        except OSError:
            pass

    # -- introspection (tests) -------------------------------------------

    def subscriptions(self) -> list[Subscription]:
        with self._lock:
            return [
                Subscription(pattern=p, subscriber=c.key)
                for c in self._conns.values()
                for p in sorted(c.patterns)
            ]


def serve_forever(host: str = "127.0.0.1", port: int | None = None) -> None:
    """Blocking entry point used by the CLI."""
    broker = Broker(host=host, port=port)
    broker.start()
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        broker.stop()
