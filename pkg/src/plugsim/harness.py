"""Run orchestration: builds the broker and all agents from a scenario and
drives them in lockstep or realtime.

Lockstep tick protocol (the determinism core): at each tick t the clock agent
publishes ``clock/tick``; then the harness makes passes over the agents in
declaration order. In every pass each agent first waits for a bus barrier
(PING/PONG) so everything already routed to it is locally queued, then
dispatches those deliveries; on the first pass it additionally fires its due
heartbeats after draining, so actuations delivered before a device's
heartbeat take effect that tick. Passes repeat until one delivers nothing.
Every publish in lockstep mode is itself barrier-flushed, which makes broker
routing order equal publish order; the whole run is then a pure function of
the scenario document.
"""

from __future__ import annotations

import json
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .agent import Agent, AgentConfig, Clock
from .broker import Broker
from .coordination import DrAgent, ShedControlAgent
from .cosim import CosimGateway
from .devices import (
    DefrostSchedule,
    EVChargerParams,
    EVChargerState,
    PVState,
    RefrigeratorParams,
    RefrigeratorState,
    WaterHeaterParams,
    WaterHeaterState,
)
from .errors import ConfigInvalid, PlugsimError
from .ingest import (
    BackgroundDevice,
    DeviceDriver,
    EVChargerDevice,
    HistorianAgent,
    PVDevice,
    RefrigeratorDevice,
    ReplayAgent,
    WaterHeaterDevice,
)
from .scenario import DeviceBlock, ScenarioConfig

TICK_MESSAGE_GUARD = 10_000

# reference defrost schedules: 2:12am/10:12am/6:12pm, and the load-shifted
# pair at 4:12am/9:12pm, all 30 minutes
BASELINE_DEFROST_WINDOWS = ((7920, 1800), (36720, 1800), (65520, 1800))
SHIFTED_DEFROST_WINDOWS = ((15120, 1800), (76320, 1800))


class AgentStartupFailure(PlugsimError):
    """An agent failed to start; message names the agent."""


class TickOverflow(PlugsimError):
    """The per-tick message guard tripped (livelock suspected)."""

    def __init__(self, t: float, histogram: dict[str, int]):
        self.t = t
        self.histogram = histogram
        top = ", ".join(f"{k}={v}" for k, v in
                        sorted(histogram.items(), key=lambda kv: -kv[1])[:8])
        super().__init__(f"more than {TICK_MESSAGE_GUARD} messages in tick t={t}: {top}")


def _subset(d: dict, keys) -> dict:
    return {k: d[k] for k in keys if k in d}


def build_device(block: DeviceBlock):
    """Device block -> model wrapper instance."""
    params = block.params
    initial = block.initial
    if block.kind == "refrigerator":
        p = RefrigeratorParams(**_subset(params, RefrigeratorParams.__dataclass_fields__))
        state = RefrigeratorState(
            T_cab=float(initial.get("T_cab", 3.0)),
            compressor_on=bool(initial.get("compressor_on", False)),
            params=p,
        )
        windows = block.defrost_windows or []
        sched = DefrostSchedule(windows=tuple((int(a), int(b)) for a, b in windows))
        return RefrigeratorDevice(state, sched)
    if block.kind == "water_heater":
        fields = dict(_subset(params, WaterHeaterParams.__dataclass_fields__))
        if "draw_profile" in fields:
            fields["draw_profile"] = tuple(tuple(x) for x in fields["draw_profile"])
        p = WaterHeaterParams(**fields)
        state = WaterHeaterState(
            T_tank=float(initial.get("T_tank", 52.0)),
            element_on=bool(initial.get("element_on", False)),
            enabled=bool(initial.get("enabled", True)),
            params=p,
        )
        return WaterHeaterDevice(state)
    if block.kind == "ev_charger":
        p = EVChargerParams(**_subset(params, EVChargerParams.__dataclass_fields__))
        state = EVChargerState(
            plugged=bool(initial.get("plugged", False)),
            enabled=bool(initial.get("enabled", True)),
            soc_kwh=float(initial.get("soc_kwh", 0.0)),
            params=p,
        )
        return EVChargerDevice(state)
    if block.kind == "pv":
        profile = tuple((float(a), float(b)) for a, b in (block.profile or []))
        return PVDevice(PVState(capacity_w=float(params.get("capacity_w", 5000.0)),
                                profile=profile))
    if block.kind == "background":
        profile = tuple((float(a), float(b)) for a, b in (block.profile or []))
        return BackgroundDevice(profile)
    raise ConfigInvalid("kind", f"unknown device kind {block.kind!r}")


@dataclass
class RunArtifacts:
    historian_path: Path
    meta_path: Path
    report_path: Path
    ticks: int = 0
    messages: int = 0
    shed_log: list[dict] = field(default_factory=list)
    dr_log: list[dict] = field(default_factory=list)


class SimulationRun:
    """One assembled simulation (broker + agents) ready to run."""

    def __init__(self, cfg: ScenarioConfig, out_dir: str | Path):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        mode = "lockstep" if cfg.sim.mode == "LOCKSTEP" else "realtime"
        self.clock = Clock(mode)
        self.clock.sim_t_s = float(cfg.sim.start_s)
        self.broker = Broker(port=cfg.broker_port)
        self.agents: list[Agent] = []
        self.drivers: dict[str, DeviceDriver] = {}
        self.replays: list[ReplayAgent] = []
        self.historians: list[HistorianAgent] = []
        self.dr_agent: DrAgent | None = None
        self.shed_agent: ShedControlAgent | None = None
        self.gateway: CosimGateway | None = None
        self.bridge_server = None  # set by the bridge module when enabled
        self.clock_agent: Agent | None = None
        self._assembled = False
        self._started = False
        self._wall0_ms: int | None = None
        self.artifacts = RunArtifacts(
            historian_path=self.out_dir / cfg.historian_path,
            meta_path=self.out_dir / "run_meta.json",
            report_path=self.out_dir / cfg.report_path,
        )

    # -- assembly -----------------------------------------------------------

    def _new_agent(self, agent_id: str, kind: str, heartbeat_s: float = 60.0,
                   point_map: dict[str, str] | None = None) -> Agent:
        cfg = AgentConfig(
            agent_id=agent_id,
            interface_kind=kind,
            bus_endpoint=f"127.0.0.1:{self.broker.port}",
            heartbeat_s=heartbeat_s,
            point_map=point_map or {},
        )
        agent = Agent(cfg, clock=self.clock)
        agent.hb_scale = 1.0 / self.cfg.sim.speedup
        self.agents.append(agent)
        return agent

    def assemble(self) -> None:
        if self._assembled:
            return
        self._assembled = True
        self.broker.start()
        cfg = self.cfg

        self.clock_agent = self._new_agent("clock", "control", cfg.sim.timestep_s)
        if cfg.sim.mode == "REALTIME":
            # lockstep publishes clock/tick from tick(); realtime needs the
            # wall-scheduled equivalent so time-keyed consumers see sim time
            self.clock_agent.heartbeat(
                cfg.sim.timestep_s,
                lambda t: self.clock_agent.publish(
                    "clock/tick", {"t": cfg.sim.start_s + t}))

        for block in cfg.devices:
            agent = self._new_agent(block.agent_id, "virtual-device", block.heartbeat_s)
            device = build_device(block)
            self.drivers[block.id] = DeviceDriver(agent, device, block.base_topic)

        for raw in cfg.agents:
            acfg = dict(raw)
            kind = acfg["interface_kind"]
            agent = self._new_agent(acfg["agent_id"], kind,
                                    float(acfg.get("heartbeat_s", cfg.sim.timestep_s)))
            params = acfg.get("params", {})
            if kind == "csv-replay":
                path = acfg.get("device_endpoint") or params.get("path")
                if not path:
                    raise ConfigInvalid("device_endpoint", f"{acfg['agent_id']}: csv path required")
                path = self._resolve(path)
                self.replays.append(ReplayAgent(
                    agent, path,
                    speedup=float(params.get("speedup", cfg.sim.speedup)),
                    topic_prefix=params.get("topic_prefix"),
                ))
            else:
                out = self._resolve_out(params.get("path", f"{acfg['agent_id']}.csv"))
                self.historians.append(HistorianAgent(
                    agent, list(params.get("patterns", ["devices"])), out))

        dr = self._new_agent("dr-agent", "dr", cfg.sim.timestep_s)
        self.dr_agent = DrAgent(dr, list(cfg.dr_events), cfg.default_price_per_kwh,
                                period_s=cfg.sim.timestep_s)

        if cfg.shed_policy is not None:
            shed = self._new_agent("shed-control", "control", cfg.sim.timestep_s)
            self.shed_agent = ShedControlAgent(shed, cfg.shed_policy,
                                               period_s=cfg.sim.timestep_s)

        if cfg.cosim is not None:
            gw_agent = self._new_agent("cosim-gateway", "cosim", cfg.sim.timestep_s)
            self.gateway = CosimGateway(
                gw_agent,
                output_topic_map=dict(cfg.cosim.get("outputs", {})),
                input_topic_map=dict(cfg.cosim.get("inputs", {})),
                input_defaults=dict(cfg.cosim.get("defaults", {})),
                port=int(cfg.cosim.get("port", 0)),
            )

        historian = self._new_agent("historian", "historian", cfg.sim.timestep_s)
        self.historians.append(HistorianAgent(
            historian, cfg.historian_patterns, self.artifacts.historian_path))

    def _resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.cfg.source_dir is not None:
            return self.cfg.source_dir / p
        return p

    def _resolve_out(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.out_dir / p

    def start(self) -> None:
        if not self._started:
            self.assemble()
            if self.cfg.bridge is not None:
                from .bridge import attach_bridge

                attach_bridge(self, port=int(self.cfg.bridge.get("port", 0)))
        for agent in self.agents:
            if agent.started:
                continue
            try:
                agent.start()
            except PlugsimError as exc:
                raise AgentStartupFailure(f"{agent.agent_id}: {exc}") from exc
        if self.gateway is not None:
            self.gateway.start()
        if self.bridge_server is not None:
            self.bridge_server.start()
        self._started = True

    def stop(self) -> None:
        if self.gateway is not None:
            self.gateway.stop()
        # agents first: realtime dispatch threads must go quiet before the
        # historian files they write to are closed
        for agent in self.agents:
            agent.stop()
        for hist in self.historians:
            hist.close()
        self.broker.stop()

    # -- lockstep ------------------------------------------------------------

    def tick(self, t: float) -> int:
        """Run one lockstep tick; returns messages dispatched."""
        self.clock.sim_t_s = float(t)
        assert self.clock_agent is not None
        self.clock_agent.publish("clock/tick", {"t": t})
        topics: list[str] = []
        total = 0
        first = True
        while True:
            delivered = 0
            for agent in self.agents:
                agent.flush()
                delivered += agent.drain(topics_out=topics)
                if first:
                    agent.fire_heartbeats(t)
            total += delivered
            if total > TICK_MESSAGE_GUARD:
                raise TickOverflow(t, dict(Counter(topics)))
            if not first and delivered == 0:
                break
            first = False
        return total

    def run_lockstep(self) -> RunArtifacts:
        sim = self.cfg.sim
        self.start()
        try:
            t = sim.start_s
            while t < sim.end_s:
                self.artifacts.messages += self.tick(float(t))
                self.artifacts.ticks += 1
                t += sim.timestep_s
        finally:
            self._finish()
        return self.artifacts

    # -- realtime --------------------------------------------------------------

    def run_realtime(self) -> RunArtifacts:
        sim = self.cfg.sim
        wall0_ms = int(time.time() * 1000)
        self._wall0_ms = wall0_ms
        self.start()
        try:
            horizon_wall = (sim.end_s - sim.start_s) / sim.speedup
            deadline = time.monotonic() + horizon_wall
            replay_threads = []
            for replay in self.replays:
                th = threading.Thread(target=replay.run_realtime, daemon=True)
                th.start()
                replay_threads.append(th)
            while time.monotonic() < deadline:
                time.sleep(min(0.05, max(0.0, deadline - time.monotonic())))
            self.artifacts.ticks = sim.ticks
        finally:
            self._finish(wall0_ms=wall0_ms)
        return self.artifacts

    def current_meta(self, wall0_ms: int | None = None) -> dict[str, Any]:
        return {
            "mode": self.cfg.sim.mode,
            "start_s": self.cfg.sim.start_s,
            "end_s": self.cfg.sim.end_s,
            "timestep_s": self.cfg.sim.timestep_s,
            "speedup": self.cfg.sim.speedup,
            "seed": self.cfg.seed,
            "demand_window_s": self.cfg.demand_window_s,
            "demand_rate_per_kw": self.cfg.demand_rate_per_kw,
            "wall0_ms": wall0_ms if wall0_ms is not None else self._wall0_ms,
            "ticks": self.artifacts.ticks,
            "messages": self.artifacts.messages,
            "devices": [
                {"id": b.id, "kind": b.kind, "base_topic": b.base_topic,
                 "heartbeat_s": b.heartbeat_s}
                for b in self.cfg.devices
            ],
            "shed_log": (list(self.shed_agent.shed_log)
                         if self.shed_agent is not None else self.artifacts.shed_log),
            "dr_log": (list(self.dr_agent.event_log)
                       if self.dr_agent is not None else self.artifacts.dr_log),
        }

    def _finish(self, wall0_ms: int | None = None) -> None:
        if self.dr_agent is not None:
            self.artifacts.dr_log = list(self.dr_agent.event_log)
        if self.shed_agent is not None:
            self.artifacts.shed_log = list(self.shed_agent.shed_log)
        if self.bridge_server is not None:
            self.bridge_server.stop()
            self.bridge_server = None
        self.stop()
        if self.cfg.sim.mode == "REALTIME":
            self.artifacts.messages = sum(a.delivered for a in self.agents)
        meta = self.current_meta(wall0_ms)
        self.artifacts.meta_path.write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path) -> RunArtifacts:
    run = SimulationRun(cfg, out_dir)
    if cfg.sim.mode == "LOCKSTEP":
        return run.run_lockstep()
    return run.run_realtime()
