"""Data-path agents: device drivers, CSV replay, and the CSV historian.

Drivers bridge a device model and the bus: each heartbeat steps the model one
period and publishes the read points; writes arrive as bus messages and are
applied to model state before the next step. Topic convention:
``devices/<building>/<device>/<point>``.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from .agent import Agent
from .devices import (
    MODE_CODES,
    DefrostSchedule,
    EVChargerState,
    InvalidParams,
    PVState,
    RefrigeratorState,
    WaterHeaterState,
    interp_profile,
    step_ev_charger,
    step_pv,
    step_refrigerator,
    step_water_heater,
)
from .envelope import MessageEnvelope, valid_topic
from .errors import PlugsimError


class CsvParse(PlugsimError):
    """A replay CSV row could not be parsed (message includes line number)."""


class NonFiniteValue(PlugsimError):
    """A replay CSV row carries NaN or infinity."""


class UnknownPoint(PlugsimError):
    """A write arrived for a point the device does not expose."""


class ValueOutOfRange(PlugsimError):
    """A write carried a value outside the point's accepted range."""


@dataclass(frozen=True)
class PointRecord:
    ts_ms: int
    topic: str
    value: float
    unit: str | None = None

    def __post_init__(self):
        if not valid_topic(self.topic):
            raise CsvParse(f"bad topic {self.topic!r}")
        if not math.isfinite(self.value):
            raise NonFiniteValue(f"non-finite value for {self.topic}")


def _as_flag(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)) and value in (0, 1):
        return bool(value)
    raise ValueOutOfRange(f"expected 0 or 1, got {value!r}")


# --------------------------------------------------------------------------
# device wrappers: uniform step/read/apply over the pure models


class RefrigeratorDevice:
    kind = "refrigerator"
    read_points = ("power", "t_cab", "mode")
    write_points = ("defrost_schedule",)

    def __init__(self, state: RefrigeratorState, schedule: DefrostSchedule):
        self.state = state
        self.schedule = schedule
        self.power = 0.0

    def step(self, t: float, dt: float) -> None:
        self.state, self.power = step_refrigerator(self.state, t, dt, self.schedule)

    def read(self) -> dict[str, float]:
        return {
            "power": self.power,
            "t_cab": self.state.T_cab,
            "mode": MODE_CODES[self.state.mode],
        }

    def apply(self, point: str, value: Any) -> None:
        if point != "defrost_schedule":
            raise UnknownPoint(point)
        try:
            self.schedule = DefrostSchedule.from_payload(value)
        except InvalidParams as exc:
            raise ValueOutOfRange(str(exc)) from exc


class WaterHeaterDevice:
    kind = "water_heater"
    read_points = ("power", "t_tank", "element_on", "enabled_state")
    write_points = ("enabled",)

    def __init__(self, state: WaterHeaterState):
        self.state = state
        self.power = 0.0

    def step(self, t: float, dt: float) -> None:
        self.state, self.power = step_water_heater(self.state, t, dt)

    def read(self) -> dict[str, float]:
        return {
            "power": self.power,
            "t_tank": self.state.T_tank,
            "element_on": int(self.state.element_on),
            "enabled_state": int(self.state.enabled),
        }

    def apply(self, point: str, value: Any) -> None:
        if point != "enabled":
            raise UnknownPoint(point)
        self.state = replace(self.state, enabled=_as_flag(value))


class EVChargerDevice:
    kind = "ev_charger"
    read_points = ("power", "soc_kwh", "plugged_state", "enabled_state")
    write_points = ("plugged", "enabled")

    def __init__(self, state: EVChargerState):
        self.state = state
        self.power = 0.0

    def step(self, t: float, dt: float) -> None:
        self.state, self.power = step_ev_charger(self.state, t, dt)

    def read(self) -> dict[str, float]:
        return {
            "power": self.power,
            "soc_kwh": self.state.soc_kwh,
            "plugged_state": int(self.state.plugged),
            "enabled_state": int(self.state.enabled),
        }

    def apply(self, point: str, value: Any) -> None:
        if point == "plugged":
            self.state = replace(self.state, plugged=_as_flag(value))
        elif point == "enabled":
            self.state = replace(self.state, enabled=_as_flag(value))
        else:
            raise UnknownPoint(point)


class PVDevice:
    kind = "pv"
    read_points = ("power",)
    write_points = ()

    def __init__(self, state: PVState):
        self.state = state
        self.power = 0.0

    def step(self, t: float, dt: float) -> None:
        self.state, self.power = step_pv(self.state, t, dt)

    def read(self) -> dict[str, float]:
        return {"power": self.power}

    def apply(self, point: str, value: Any) -> None:
        raise UnknownPoint(point)


class BackgroundDevice:
    """Non-controllable site load from a piecewise-linear (seconds, W) profile."""

    kind = "background"
    read_points = ("power",)
    write_points = ()

    def __init__(self, profile: tuple[tuple[float, float], ...]):
        self.profile = profile
        self.power = 0.0

    def step(self, t: float, dt: float) -> None:
        self.power = interp_profile(self.profile, t)

    def read(self) -> dict[str, float]:
        return {"power": self.power}

    def apply(self, point: str, value: Any) -> None:
        raise UnknownPoint(point)


# --------------------------------------------------------------------------
# driver agent


class DeviceDriver:
    """Poll/actuate bridge between one device model and the bus."""

    def __init__(self, agent: Agent, device, base_topic: str):
        self.agent = agent
        self.device = device
        self.base_topic = base_topic
        self.reads = {p: f"{base_topic}/{p}" for p in device.read_points}
        self.writes = {f"{base_topic}/{p}": p for p in device.write_points}
        overlap = set(self.reads.values()) & set(self.writes)
        if overlap:
            raise InvalidParams(f"read/write topics overlap: {sorted(overlap)}")
        for topic in self.writes:
            agent.bind(topic, self._on_write)
        agent.heartbeat(agent.cfg.heartbeat_s, self._poll)

    def _poll(self, t: float) -> None:
        try:
            self.device.step(t, self.agent.cfg.heartbeat_s)
        except PlugsimError as exc:
            self.agent.log("ERROR", f"device step failed at t={t}: {exc}")
            return
        ts_ms = self.agent.clock.now_ms()
        for point, topic in self.reads.items():
            value = self.device.read()[point]
            self.agent.publish(topic, value, ts_ms=ts_ms)

    def _on_write(self, env: MessageEnvelope) -> None:
        point = self.writes.get(env.topic or "")
        if point is None:
            return
        try:
            self.device.apply(point, env.payload)
            self.agent.log("INFO", f"applied {point}={env.payload!r} from {env.sender}")
        except (UnknownPoint, ValueOutOfRange, InvalidParams) as exc:
            self.agent.publish(
                f"agents/{self.agent.agent_id}/error",
                f"{type(exc).__name__}: {exc}",
            )
            self.agent.log("ERROR", f"rejected write to {env.topic}: {exc}")


# --------------------------------------------------------------------------
# CSV replay


def load_replay_csv(path: str | Path) -> list[PointRecord]:
    rows: list[PointRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        cols = [c.strip() for c in header]
        if cols[:3] != ["ts_ms", "topic", "value"]:
            raise CsvParse(f"line 1: expected header ts_ms,topic,value[,unit], got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 3:
                raise CsvParse(f"line {lineno}: expected at least 3 columns")
            try:
                ts_ms = int(row[0])
                value = float(row[2])
            except ValueError as exc:
                raise CsvParse(f"line {lineno}: {exc}") from exc
            if not math.isfinite(value):
                raise NonFiniteValue(f"line {lineno}: non-finite value")
            unit = row[3].strip() if len(row) > 3 and row[3].strip() else None
            try:
                rows.append(PointRecord(ts_ms=ts_ms, topic=row[1].strip(), value=value, unit=unit))
            except CsvParse as exc:
                raise CsvParse(f"line {lineno}: {exc}") from exc
    rows.sort(key=lambda r: r.ts_ms)
    return rows


class ReplayAgent:
    """Publishes recorded rows; timestamp semantics depend on the clock mode.

    Lockstep: each heartbeat at sim t publishes every row with ts_ms in
    (prev_ms, t*1000]. Realtime: rows are paced at ts_ms/speedup wall seconds
    from start. Row timestamps are preserved on the wire.
    """

    def __init__(self, agent: Agent, path: str | Path, speedup: float = 1.0,
                 topic_prefix: str | None = None):
        self.agent = agent
        self.rows = load_replay_csv(path)
        self.speedup = speedup
        self.topic_prefix = topic_prefix
        self._next = 0
        self._prev_ms = None  # half-open window start, exclusive
        agent.heartbeat(agent.cfg.heartbeat_s, self._tick)

    def _topic(self, row: PointRecord) -> str:
        if self.topic_prefix:
            return f"{self.topic_prefix}/{row.topic}"
        return row.topic

    def _tick(self, t: float) -> None:
        if self.agent.clock.mode != "lockstep":
            return
        now_ms = int(t * 1000)
        while self._next < len(self.rows) and self.rows[self._next].ts_ms <= now_ms:
            row = self.rows[self._next]
            if self._prev_ms is None or row.ts_ms > self._prev_ms:
                self.agent.publish(self._topic(row), row.value, ts_ms=row.ts_ms)
            self._next += 1
        self._prev_ms = now_ms

    def done(self) -> bool:
        return self._next >= len(self.rows)

    def run_realtime(self) -> None:
        """Blocking paced replay; call from a dedicated thread or the CLI."""
        start = time.monotonic()
        t0 = self.rows[0].ts_ms if self.rows else 0
        for row in self.rows:
            due = start + (row.ts_ms - t0) / 1000.0 / self.speedup
            delay = due - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            self.agent.publish(self._topic(row), row.value, ts_ms=row.ts_ms)
        self._next = len(self.rows)


# --------------------------------------------------------------------------
# historian


class HistorianAgent:
    """Appends every numeric delivery to a CSV (`ts_ms,topic,value`).

    Non-numeric payloads are counted and skipped. Rows are flushed at least
    every 100 rows or 5 wall seconds; close() leaves a valid CSV.
    """

    FLUSH_ROWS = 100
    FLUSH_S = 5.0

    def __init__(self, agent: Agent, patterns: list[str], out_path: str | Path):
        self.agent = agent
        self.out_path = Path(out_path)
        self.rows_written = 0
        self.skipped = 0
        self._unflushed = 0
        self._last_flush = time.monotonic()
        self._fh = open(self.out_path, "w", newline="", encoding="utf-8")
        self._fh.write("ts_ms,topic,value\n")
        for pattern in patterns:
            agent.subscribe(pattern)
        agent.on_delivery(self._record)

    def _record(self, env: MessageEnvelope) -> None:
        value = env.payload
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.skipped += 1
            return
        if not math.isfinite(value):
            self.skipped += 1
            return
        self._fh.write(f"{env.ts_ms},{env.topic},{value!r}\n")
        self.rows_written += 1
        self._unflushed += 1
        now = time.monotonic()
        if self._unflushed >= self.FLUSH_ROWS or now - self._last_flush >= self.FLUSH_S:
            self._fh.flush()
            self._unflushed = 0
            self._last_flush = now

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()


def read_historian_csv(path: str | Path) -> list[tuple[int, str, float]]:
    out: list[tuple[int, str, float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        for row in reader:
            if not row:
                continue
            out.append((int(row[0]), row[1], float(row[2])))
    return out
