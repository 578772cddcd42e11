"""HTTP + WebSocket gateway exposing a running simulation to operator UIs.

The bridge is one bus agent fanned out to any number of HTTP/WS clients.
Reads come from an in-memory cache of the latest value per topic; writes are
restricted to the drivers' writable points plus ``dr/...`` and are published
with sender ``hmi-bridge``. Stream clients get matching envelopes in the same
line form used on the bus, with a drop-oldest bound per client.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import uvicorn
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .coordination import TOPIC_DR_INJECT
from .envelope import encode_frame, valid_topic
from .errors import PlugsimError
from .report import EmptyHistorian, make_report

log = logging.getLogger(__name__)

DEFAULT_HTTP_PORT = 8080
HTTP_PORT_ENV = "PLUGSIM_HTTP_PORT"
SESSION_QUEUE_BOUND = 1000
WS_PING_INTERVAL_S = 15.0


def default_http_port() -> int:
    raw = os.environ.get(HTTP_PORT_ENV)
    if raw:
        return int(raw)
    return DEFAULT_HTTP_PORT


def _matches_any(patterns: set[str], topic: str) -> bool:
    from .envelope import topic_matches

    return any(topic_matches(p, topic) for p in patterns)


@dataclass
class _Session:
    session_id: int
    patterns: set[str] = field(default_factory=set)
    queue: deque = field(default_factory=lambda: deque(maxlen=SESSION_QUEUE_BOUND))
    dropped: int = 0


class BridgeServer:
    """Serves the operator API for one running simulation."""

    def __init__(self, agent, devices: list[dict[str, Any]],
                 writable_topics: set[str], historian_path: str | Path | None = None,
                 meta_provider: Callable[[], dict] | None = None,
                 mode: str = "REALTIME", host: str = "127.0.0.1",
                 port: int | None = None, cors: bool = True):
        self.agent = agent
        self.devices = devices
        self.writable_topics = set(writable_topics)
        self.historian_path = Path(historian_path) if historian_path else None
        self.meta_provider = meta_provider
        self.mode = mode
        self.host = host
        self.port = default_http_port() if port is None else port
        self.latest: dict[str, tuple[int, Any]] = {}
        self.sim_time_s: float = 0.0
        self.dr_active: dict[str, dict] = {}
        self.shed_set: list[str] = []
        self._sessions: dict[int, _Session] = {}
        self._session_ids = itertools.count(1)
        self._lock = threading.Lock()
        self._server: uvicorn.Server | None = None
        self._thread: threading.Thread | None = None
        self.app = self._build_app(cors)

        for pattern in ("devices", "dr", "control", "clock", "agents", "campus", "cosim"):
            agent.subscribe(pattern)
        agent.on_delivery(self._on_delivery)

    # -- bus side --------------------------------------------------------

    def _on_delivery(self, env) -> None:
        topic = env.topic or ""
        self.latest[topic] = (env.ts_ms, env.payload)
        if topic == "clock/tick" and isinstance(env.payload, dict):
            t = env.payload.get("t")
            if isinstance(t, (int, float)):
                self.sim_time_s = float(t)
        elif topic == "dr/events" and isinstance(env.payload, dict):
            event_id = str(env.payload.get("event_id"))
            if env.payload.get("status") == "active":
                self.dr_active[event_id] = dict(env.payload)
            else:
                self.dr_active.pop(event_id, None)
        elif topic == "control/shed" and isinstance(env.payload, dict):
            shed = env.payload.get("shed")
            if isinstance(shed, list):
                self.shed_set = [str(x) for x in shed]
        line = encode_frame(env).decode("utf-8").rstrip("\n")
        with self._lock:
            for session in self._sessions.values():
                if _matches_any(session.patterns, topic):
                    if len(session.queue) == session.queue.maxlen:
                        session.dropped += 1
                    session.queue.append(line)

    # -- HTTP app ------------------------------------------------------------

    def _device_entry(self, dev: dict[str, Any]) -> dict[str, Any]:
        base = dev["base_topic"]
        prefix = base + "/"
        points = {
            topic[len(prefix):]: value
            for topic, (_, value) in sorted(self.latest.items())
            if topic.startswith(prefix)
        }
        writable = sorted(t for t in self.writable_topics if t.startswith(prefix))
        return {"id": dev["id"], "kind": dev["kind"], "points": points,
                "writable": writable}

    def _build_app(self, cors: bool) -> FastAPI:
        app = FastAPI(title="plugsim bridge", docs_url=None, redoc_url=None)
        if cors:
            app.add_middleware(
                CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                allow_headers=["*"])

        @app.get("/api/v1/state")
        def state() -> dict:
            return {
                "sim_time_s": self.sim_time_s,
                "mode": self.mode,
                "devices": [self._device_entry(d) for d in self.devices],
                "active_dr_events": sorted(self.dr_active.values(),
                                           key=lambda e: str(e.get("event_id"))),
                "shed_set": list(self.shed_set),
            }

        @app.get("/api/v1/devices/{device_id}")
        def device(device_id: str):
            for dev in self.devices:
                if dev["id"] == device_id:
                    prefix = dev["base_topic"] + "/"
                    records = [
                        {"ts_ms": ts, "topic": topic, "value": value}
                        for topic, (ts, value) in sorted(self.latest.items())
                        if topic.startswith(prefix)
                    ]
                    return {"id": device_id, "records": records}
            return JSONResponse({"error": f"unknown device {device_id!r}"}, status_code=404)

        @app.post("/api/v1/actions")
        async def actions(body: dict):
            topic = body.get("topic")
            if not isinstance(topic, str) or not valid_topic(topic) or "value" not in body:
                return JSONResponse({"error": "body must be {topic, value} with a valid topic"},
                                    status_code=400)
            value = body["value"]
            if isinstance(value, (dict, list)) and not topic.startswith("dr/"):
                return JSONResponse({"error": "value must be a scalar"}, status_code=400)
            if topic not in self.writable_topics and not topic.startswith("dr/"):
                return JSONResponse({"error": f"{topic} is not writable"}, status_code=409)
            ts_ms = self.agent.clock.now_ms()
            self.agent.publish(topic, value)
            return {"accepted": True, "ts_ms": ts_ms}

        @app.post("/api/v1/dr")
        async def inject_dr(body: dict):
            from .coordination import DemandResponseEvent
            from .errors import ConfigInvalid

            try:
                DemandResponseEvent.from_payload(body)
            except ConfigInvalid as exc:
                return JSONResponse({"error": str(exc)}, status_code=400)
            self.agent.publish(TOPIC_DR_INJECT, body)
            return {"accepted": True, "ts_ms": self.agent.clock.now_ms()}

        @app.get("/api/v1/report")
        def report():
            if self.historian_path is None or not self.historian_path.exists():
                return {"empty": True}
            meta = self.meta_provider() if self.meta_provider else None
            try:
                rep = make_report(self.historian_path, meta_override=meta)
            except EmptyHistorian:
                return {"empty": True}
            return rep.to_dict()

        @app.websocket("/api/v1/stream")
        async def stream(ws: WebSocket):
            await ws.accept()
            session = _Session(session_id=next(self._session_ids))
            with self._lock:
                self._sessions[session.session_id] = session
            try:
                await self._stream_loop(ws, session)
            except WebSocketDisconnect:
                pass
            finally:
                with self._lock:
                    self._sessions.pop(session.session_id, None)

        return app

    async def _stream_loop(self, ws: WebSocket, session: _Session) -> None:
        async def reader():
            while True:
                raw = await ws.receive_text()
                try:
                    msg = json.loads(raw)
                    op = msg.get("op")
                except (json.JSONDecodeError, AttributeError):
                    op = None
                    msg = {}
                if op == "subscribe":
                    patterns = [p for p in msg.get("patterns", []) if valid_topic(p)]
                    with self._lock:
                        session.patterns.update(patterns)
                elif op == "unsubscribe":
                    remove = msg.get("patterns")
                    with self._lock:
                        if remove is None:
                            session.patterns.clear()
                        else:
                            session.patterns.difference_update(remove)
                else:
                    await ws.send_text(json.dumps({"error": f"invalid op {op!r}"}))

        async def writer():
            last_ping = time.monotonic()
            while True:
                sent = False
                while True:
                    with self._lock:
                        if not session.queue:
                            break
                        line = session.queue.popleft()
                    await ws.send_text(line)
                    sent = True
                now = time.monotonic()
                if now - last_ping >= WS_PING_INTERVAL_S:
                    await ws.send_text(json.dumps(
                        {"v": 1, "kind": "PING", "sender": "hmi-bridge",
                         "ts_ms": self.agent.clock.now_ms()}))
                    last_ping = now
                if not sent:
                    await asyncio.sleep(0.05)

        reader_task = asyncio.create_task(reader())
        writer_task = asyncio.create_task(writer())
        done, pending = await asyncio.wait(
            {reader_task, writer_task}, return_when=asyncio.FIRST_COMPLETED)
        for task in pending:
            task.cancel()
        for task in done:
            exc = task.exception()
            if exc is not None and not isinstance(exc, WebSocketDisconnect):
                raise exc

    # -- lifecycle ----------------------------------------------------------

    def start(self, wait_s: float = 10.0) -> None:
        config = uvicorn.Config(self.app, host=self.host, port=self.port,
                                log_level="warning", ws_ping_interval=None)
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self._server.run,
                                        name="hmi-bridge-http", daemon=True)
        self._thread.start()
        deadline = time.monotonic() + wait_s
        while time.monotonic() < deadline:
            if self._server.started:
                servers = getattr(self._server, "servers", [])
                if servers and servers[0].sockets:
                    self.port = servers[0].sockets[0].getsockname()[1]
                return
            time.sleep(0.01)
        raise PlugsimError("bridge HTTP server failed to start")

    def stop(self) -> None:
        if self._server is not None:
            self._server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout=5.0)


def writable_topics_for(drivers: dict[str, Any]) -> set[str]:
    """Union of all driver write maps."""
    out: set[str] = set()
    for driver in drivers.values():
        out.update(driver.writes.keys())
    return out


def attach_bridge(run, host: str = "127.0.0.1", port: int | None = None) -> BridgeServer:
    """Wire a BridgeServer onto an assembled SimulationRun."""
    agent = run._new_agent("hmi-bridge", "bridge", run.cfg.sim.timestep_s)
    devices = [
        {"id": b.id, "kind": b.kind, "base_topic": b.base_topic}
        for b in run.cfg.devices
    ]
    bridge = BridgeServer(
        agent=agent,
        devices=devices,
        writable_topics=writable_topics_for(run.drivers),
        historian_path=run.artifacts.historian_path,
        meta_provider=run.current_meta,
        mode=run.cfg.sim.mode,
        host=host,
        port=port,
    )
    run.bridge_server = bridge
    return bridge
