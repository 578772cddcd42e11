"""Scenario documents: one JSON file declares a full simulation run.

Shape:

    {
      "sim": {"start_s": 0, "end_s": 86400, "timestep_s": 60,
              "mode": "LOCKSTEP", "speedup": 1.0},
      "broker": {"port": 0},
      "seed": 1,
      "devices": [
        {"kind": "refrigerator", "id": "fridge1", "building": "b1",
         "heartbeat_s": 60, "params": {...}, "initial": {...},
         "defrost_windows": [[7920, 1800], ...]},
        {"kind": "background", "id": "site", "profile": [[0, 12000], ...]}
      ],
      "agents": [ ... csv-replay / historian blocks ... ],
      "dr_events": [...], "shed_policy": {...},
      "demand": {"window_s": 900, "rate_per_kw": 15.0},
      "defrost_plan": {"slot_s": 1800, "units": [...]},
      "outputs": {"historian_patterns": ["devices"],
                  "historian_path": "historian.csv",
                  "report_path": "report.json"}
    }

Topics are derived from device blocks as ``devices/<building>/<id>/<point>``;
device heartbeats default to the sim timestep. Field errors name the full
path (e.g. ``devices[2].id``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .agent import load_agent_config
from .coordination import (
    DEFAULT_DEMAND_WINDOW_S,
    DEFAULT_PRICE_PER_KWH,
    DemandResponseEvent,
    ShedLoad,
    ShedPolicy,
    validate_events,
)
from .devices import DefrostSchedule, InvalidParams
from .errors import ConfigInvalid, ConfigParse

DEVICE_KINDS = ("refrigerator", "water_heater", "ev_charger", "pv", "background")
RESERVED_AGENT_IDS = ("clock", "dr-agent", "shed-control", "historian",
                      "cosim-gateway", "hmi-bridge")


@dataclass(frozen=True)
class SimSettings:
    start_s: int = 0
    end_s: int = 86400
    timestep_s: int = 60
    mode: str = "LOCKSTEP"
    speedup: float = 1.0

    @property
    def ticks(self) -> int:
        return (self.end_s - self.start_s) // self.timestep_s


@dataclass
class DeviceBlock:
    kind: str
    id: str
    building: str = "b1"
    heartbeat_s: float = 60.0
    params: dict[str, Any] = field(default_factory=dict)
    initial: dict[str, Any] = field(default_factory=dict)
    defrost_windows: list[list[int]] | None = None
    profile: list[list[float]] | None = None

    @property
    def base_topic(self) -> str:
        return f"devices/{self.building}/{self.id}"

    @property
    def agent_id(self) -> str:
        return f"{self.id}-driver"


@dataclass
class ScenarioConfig:
    sim: SimSettings
    broker_port: int
    seed: int
    devices: list[DeviceBlock]
    agents: list[dict[str, Any]]
    dr_events: list[DemandResponseEvent]
    default_price_per_kwh: float
    shed_policy: ShedPolicy | None
    demand_window_s: int
    demand_rate_per_kw: float
    defrost_plan: dict[str, Any] | None
    historian_patterns: list[str]
    historian_path: str
    report_path: str
    bridge: dict[str, Any] | None
    cosim: dict[str, Any] | None
    source_dir: Path | None = None

    def device(self, device_id: str) -> DeviceBlock:
        for block in self.devices:
            if block.id == device_id:
                return block
        raise ConfigInvalid("devices", f"no device {device_id!r}")


def _require(cond: bool, path: str, reason: str) -> None:
    if not cond:
        raise ConfigInvalid(path, reason)


def _num(obj: dict, key: str, path: str, default=None):
    value = obj.get(key, default)
    _require(isinstance(value, (int, float)) and not isinstance(value, bool),
             f"{path}.{key}", "must be a number")
    return value


def load_scenario(source: str | Path | dict[str, Any]) -> ScenarioConfig:
    if isinstance(source, (str, Path)):
        src_dir = Path(source).parent
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
        src_dir = None
    if not isinstance(obj, dict):
        raise ConfigParse("scenario must be a map")

    sim_raw = obj.get("sim", {})
    _require(isinstance(sim_raw, dict), "sim", "must be a map")
    sim = SimSettings(
        start_s=int(_num(sim_raw, "start_s", "sim", 0)),
        end_s=int(_num(sim_raw, "end_s", "sim", 86400)),
        timestep_s=int(_num(sim_raw, "timestep_s", "sim", 60)),
        mode=str(sim_raw.get("mode", "LOCKSTEP")).upper(),
        speedup=float(_num(sim_raw, "speedup", "sim", 1.0)),
    )
    _require(sim.end_s > sim.start_s, "sim.end_s", "must be after start_s")
    _require(sim.timestep_s > 0, "sim.timestep_s", "must be positive")
    _require((sim.end_s - sim.start_s) % sim.timestep_s == 0,
             "sim.timestep_s", "must divide end_s - start_s")
    _require(sim.mode in ("LOCKSTEP", "REALTIME"), "sim.mode",
             "must be LOCKSTEP or REALTIME")
    _require(sim.speedup > 0, "sim.speedup", "must be positive")

    broker_raw = obj.get("broker", {})
    _require(isinstance(broker_raw, dict), "broker", "must be a map")
    broker_port = int(broker_raw.get("port", 0))

    seed = obj.get("seed", 0)
    _require(isinstance(seed, int) and not isinstance(seed, bool), "seed", "must be an integer")

    devices: list[DeviceBlock] = []
    seen_ids: set[str] = set()
    for i, dev_raw in enumerate(obj.get("devices", [])):
        path = f"devices[{i}]"
        _require(isinstance(dev_raw, dict), path, "must be a map")
        kind = dev_raw.get("kind")
        _require(kind in DEVICE_KINDS, f"{path}.kind", f"must be one of {DEVICE_KINDS}")
        dev_id = dev_raw.get("id")
        _require(isinstance(dev_id, str) and bool(dev_id), f"{path}.id", "required non-empty string")
        _require(dev_id not in seen_ids, f"{path}.id", f"duplicate device id {dev_id!r}")
        seen_ids.add(dev_id)
        heartbeat = dev_raw.get("heartbeat_s", sim.timestep_s)
        _require(isinstance(heartbeat, (int, float)) and heartbeat > 0,
                 f"{path}.heartbeat_s", "must be a positive number")
        block = DeviceBlock(
            kind=kind,
            id=dev_id,
            building=str(dev_raw.get("building", "b1")),
            heartbeat_s=float(heartbeat),
            params=dict(dev_raw.get("params", {})),
            initial=dict(dev_raw.get("initial", {})),
            defrost_windows=dev_raw.get("defrost_windows"),
            profile=dev_raw.get("profile"),
        )
        if kind == "refrigerator" and block.defrost_windows is not None:
            try:
                DefrostSchedule(windows=tuple((int(a), int(b)) for a, b in block.defrost_windows))
            except (InvalidParams, TypeError, ValueError) as exc:
                raise ConfigInvalid(f"{path}.defrost_windows", str(exc)) from exc
        if kind in ("pv", "background"):
            _require(block.profile is not None, f"{path}.profile", f"required for {kind}")
        devices.append(block)

    agent_ids = {b.agent_id for b in devices} | set(RESERVED_AGENT_IDS)
    agents: list[dict[str, Any]] = []
    for i, agent_raw in enumerate(obj.get("agents", [])):
        path = f"agents[{i}]"
        try:
            cfg = load_agent_config(agent_raw)
        except ConfigInvalid as exc:
            raise ConfigInvalid(f"{path}.{exc.field}", exc.reason) from exc
        _require(cfg.interface_kind in ("csv-replay", "historian"),
                 f"{path}.interface_kind",
                 "only csv-replay and historian blocks are accepted here")
        _require(cfg.agent_id not in agent_ids, f"{path}.agent_id",
                 f"duplicate agent id {cfg.agent_id!r}")
        agent_ids.add(cfg.agent_id)
        agents.append(dict(agent_raw))

    events = []
    for i, ev_raw in enumerate(obj.get("dr_events", [])):
        path = f"dr_events[{i}]"
        _require(isinstance(ev_raw, dict), path, "must be a map")
        try:
            events.append(DemandResponseEvent.from_payload(ev_raw))
        except ConfigInvalid as exc:
            raise ConfigInvalid(f"{path}.{exc.field}", exc.reason) from exc
    try:
        events = validate_events(events)
    except ConfigInvalid as exc:
        raise ConfigInvalid(f"dr_events.{exc.field}", exc.reason) from exc

    shed_policy = None
    shed_raw = obj.get("shed_policy")
    if shed_raw is not None:
        _require(isinstance(shed_raw, dict), "shed_policy", "must be a map")
        loads = []
        for i, load_raw in enumerate(shed_raw.get("loads", [])):
            path = f"shed_policy.loads[{i}]"
            _require(isinstance(load_raw, dict), path, "must be a map")
            dev_id = load_raw.get("device_id")
            _require(dev_id in seen_ids, f"{path}.device_id", f"unknown device {dev_id!r}")
            block = next(b for b in devices if b.id == dev_id)
            _require(block.kind in ("water_heater", "ev_charger"),
                     f"{path}.device_id", f"{block.kind} has no enable point")
            est = load_raw.get("est_power_w")
            if est is None:
                est = block.params.get(
                    "P_elem" if block.kind == "water_heater" else "P_charge",
                    4500.0 if block.kind == "water_heater" else 7200.0)
            loads.append(ShedLoad(
                device_id=dev_id,
                enable_topic=f"{block.base_topic}/enabled",
                priority=int(load_raw.get("priority", i)),
                sheddable=bool(load_raw.get("sheddable", True)),
                est_power_w=float(est),
            ))
        limit_w = float(_num(shed_raw, "limit_w", "shed_policy"))
        margin_w = float(_num(shed_raw, "restore_margin_w", "shed_policy", 0.0))
        hold_s = float(_num(shed_raw, "restore_hold_s", "shed_policy", 0.0))
        try:
            shed_policy = ShedPolicy(loads=tuple(loads), limit_w=limit_w,
                                     restore_margin_w=margin_w, restore_hold_s=hold_s)
        except ConfigInvalid as exc:
            raise ConfigInvalid(f"shed_policy.{exc.field}", exc.reason) from exc

    demand_raw = obj.get("demand", {})
    _require(isinstance(demand_raw, dict), "demand", "must be a map")
    window_s = int(_num(demand_raw, "window_s", "demand", DEFAULT_DEMAND_WINDOW_S))
    _require(window_s > 0, "demand.window_s", "must be positive")
    rate = float(_num(demand_raw, "rate_per_kw", "demand", 15.0))

    outputs_raw = obj.get("outputs", {})
    _require(isinstance(outputs_raw, dict), "outputs", "must be a map")
    patterns = list(outputs_raw.get("historian_patterns", ["devices"]))

    return ScenarioConfig(
        sim=sim,
        broker_port=broker_port,
        seed=seed,
        devices=devices,
        agents=agents,
        dr_events=events,
        default_price_per_kwh=float(obj.get("default_price_per_kwh", DEFAULT_PRICE_PER_KWH)),
        shed_policy=shed_policy,
        demand_window_s=window_s,
        demand_rate_per_kw=rate,
        defrost_plan=obj.get("defrost_plan"),
        historian_patterns=patterns,
        historian_path=str(outputs_raw.get("historian_path", "historian.csv")),
        report_path=str(outputs_raw.get("report_path", "report.json")),
        bridge=obj.get("bridge"),
        cosim=obj.get("cosim"),
        source_dir=src_dir,
    )
