"""plugsim: a multi-agent prosumer-grid simulator.

A TCP pub/sub bus connects device driver agents (refrigerators with defrost
cycles, water heaters, EV chargers, solar PV), demand-response and
load-shedding control agents, a CSV historian and replay path, a co-simulation
gateway for external timestep models, and an HTTP/WebSocket bridge for
operator consoles. Simulations run either in deterministic lockstep or paced
against the wall clock.
"""

from .agent import Agent, AgentConfig, CallbackBinding, Clock, load_agent_config
from .broker import Broker
from .coordination import (
    DefrostPlanProblem,
    DemandResponseEvent,
    PlanUnit,
    PowerSeries,
    ShedLoad,
    ShedPolicy,
    ShedState,
    demand_charge,
    plan_defrost,
    priority_shed,
    rolling_peak,
)
from .devices import (
    DefrostSchedule,
    EVChargerParams,
    EVChargerState,
    PVState,
    RefrigeratorParams,
    RefrigeratorState,
    WaterHeaterParams,
    WaterHeaterState,
    step_ev_charger,
    step_pv,
    step_refrigerator,
    step_water_heater,
)
from .envelope import (
    FrameKind,
    MessageEnvelope,
    Subscription,
    decode_frame,
    encode_frame,
    route,
    topic_matches,
)
from .errors import ConfigInvalid, ConfigParse, PlugsimError
from .harness import SimulationRun, run_scenario
from .report import RunReport, make_report
from .scenario import ScenarioConfig, load_scenario

__version__ = "0.1.0"

__all__ = [
    "Agent",
    "AgentConfig",
    "Broker",
    "CallbackBinding",
    "Clock",
    "ConfigInvalid",
    "ConfigParse",
    "DefrostPlanProblem",
    "DefrostSchedule",
    "DemandResponseEvent",
    "EVChargerParams",
    "EVChargerState",
    "FrameKind",
    "MessageEnvelope",
    "PVState",
    "PlanUnit",
    "PlugsimError",
    "PowerSeries",
    "RefrigeratorParams",
    "RefrigeratorState",
    "RunReport",
    "ScenarioConfig",
    "ShedLoad",
    "ShedPolicy",
    "ShedState",
    "SimulationRun",
    "Subscription",
    "WaterHeaterParams",
    "WaterHeaterState",
    "decode_frame",
    "demand_charge",
    "encode_frame",
    "load_agent_config",
    "load_scenario",
    "make_report",
    "plan_defrost",
    "priority_shed",
    "rolling_peak",
    "route",
    "run_scenario",
    "step_ev_charger",
    "step_pv",
    "step_refrigerator",
    "step_water_heater",
    "topic_matches",
]
