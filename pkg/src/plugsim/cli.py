"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .agent import Agent, AgentConfig
from .broker import Broker, default_bus_port, serve_forever
from .coordination import (
    DefrostPlanProblem,
    PlanUnit,
    extract_template,
    plan_defrost,
)
from .cosim import StubZoneSimulator, default_cosim_port
from .devices import DAY_S, RefrigeratorParams, interp_profile
from .errors import ConfigInvalid, ConfigParse, PlugsimError
from .harness import run_scenario
from .ingest import ReplayAgent
from .report import compare_runs, make_report, write_report_artifacts
from .scenario import load_scenario


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plugsim",
        description="Multi-agent prosumer grid simulator: broker, device models, "
                    "demand response, and reporting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario end to end")
    p_run.add_argument("scenario", help="scenario JSON file")
    p_run.add_argument("--out", default="out", help="output directory (default: out)")
    p_run.add_argument("--mode", choices=["lockstep", "realtime"],
                       help="override the scenario's sim mode")
    p_run.add_argument("--seed", type=int, help="override the scenario's seed")

    p_broker = sub.add_parser("broker", help="run a standalone message broker")
    p_broker.add_argument("--port", type=int, default=None,
                          help=f"listen port (default: PLUGSIM_BUS_PORT or {default_bus_port()})")

    p_replay = sub.add_parser("replay", help="publish a recorded CSV onto a running broker")
    p_replay.add_argument("csv", help="CSV file with header ts_ms,topic,value[,unit]")
    p_replay.add_argument("--speedup", type=float, default=1.0)
    p_replay.add_argument("--bus", default=None, help="broker host:port")
    p_replay.add_argument("--prefix", default=None, help="topic prefix to prepend")

    p_plan = sub.add_parser("plan-defrost", help="optimize defrost windows for a scenario")
    p_plan.add_argument("scenario")
    p_plan.add_argument("--mode", choices=["exhaustive", "greedy"], default="exhaustive")
    p_plan.add_argument("--out", default=None, help="directory for the planned profile CSV")

    p_report = sub.add_parser("report", help="summarize one run, or compare two")
    p_report.add_argument("historian", help="historian CSV from a completed run")
    p_report.add_argument("historian2", nargs="?", default=None,
                          help="second historian CSV for a comparison")
    p_report.add_argument("--out", default=None, help="directory for report artifacts")

    p_stub = sub.add_parser("cosim-stub",
                            help="run the reference zone simulator against a gateway")
    p_stub.add_argument("--host", default="127.0.0.1")
    p_stub.add_argument("--port", type=int, default=None,
                        help=f"gateway port (default: PLUGSIM_COSIM_PORT or {default_cosim_port()})")
    p_stub.add_argument("--steps", type=int, default=1440)
    p_stub.add_argument("--timestep", type=float, default=60.0)

    return parser


def _cmd_run(args) -> int:
    cfg = load_scenario(args.scenario)
    if args.mode:
        from dataclasses import replace

        cfg.sim = replace(cfg.sim, mode=args.mode.upper())
    if args.seed is not None:
        cfg.seed = args.seed
    artifacts = run_scenario(cfg, args.out)
    report = make_report(artifacts.historian_path, artifacts.meta_path)
    write_report_artifacts(report, Path(args.out), name=Path(cfg.report_path).name)
    print(f"run complete: {artifacts.ticks} ticks, {artifacts.messages} messages")
    print(f"historian: {artifacts.historian_path}")
    print(f"report:    {artifacts.report_path}")
    print(f"rolling peak {report.rolling_peak_w:.1f} W, "
          f"demand charge {report.demand_charge:.2f}")
    return 0


def _cmd_broker(args) -> int:
    serve_forever(port=args.port)
    return 0


def _cmd_replay(args) -> int:
    if args.bus:
        host, _, port = args.bus.rpartition(":")
        endpoint = f"{host or '127.0.0.1'}:{int(port)}"
    else:
        endpoint = f"127.0.0.1:{default_bus_port()}"
    cfg = AgentConfig(agent_id="replay", interface_kind="csv-replay",
                      bus_endpoint=endpoint, heartbeat_s=1.0)
    agent = Agent(cfg)
    replay = ReplayAgent(agent, args.csv, speedup=args.speedup, topic_prefix=args.prefix)
    agent.start()
    try:
        replay.run_realtime()
        print(f"replayed {len(replay.rows)} rows")
    finally:
        agent.stop()
    return 0


def _plan_problem(cfg):
    plan_raw = cfg.defrost_plan
    if not plan_raw:
        raise ConfigInvalid("defrost_plan", "scenario has no defrost_plan section")
    slot_s = int(plan_raw.get("slot_s", 1800))
    units = []
    for i, unit_raw in enumerate(plan_raw.get("units", [])):
        unit_id = unit_raw.get("device_id")
        if not unit_id:
            raise ConfigInvalid(f"defrost_plan.units[{i}].device_id", "is required")
        block = cfg.device(str(unit_id))
        params = RefrigeratorParams(**{
            k: v for k, v in block.params.items()
            if k in RefrigeratorParams.__dataclass_fields__})
        duration_s = int(unit_raw.get("duration_s", 1800))
        template = extract_template(params, duration_s)
        units.append(PlanUnit(
            unit_id=str(unit_id),
            cycles_per_day=int(unit_raw.get("cycles_per_day", 1)),
            duration_s=duration_s,
            min_gap_s=int(unit_raw.get("min_gap_s", max(duration_s, 4 * 3600))),
            power_template=template,
        ))
    background = next((b for b in cfg.devices if b.kind == "background"), None)
    n_slots = DAY_S // slot_s
    if background is not None and background.profile:
        seconds = np.arange(DAY_S, dtype=float)
        profile = tuple((float(a), float(b)) for a, b in background.profile)
        per_second = np.array([interp_profile(profile, s) for s in seconds])
        bg = tuple(per_second.reshape(n_slots, slot_s).mean(axis=1).tolist())
    else:
        bg = tuple([0.0] * n_slots)
    return DefrostPlanProblem(units=tuple(units), background_w=bg, slot_s=slot_s)


def _cmd_plan(args) -> int:
    cfg = load_scenario(args.scenario)
    problem = _plan_problem(cfg)
    schedule, peak = plan_defrost(problem, mode=args.mode.upper())
    result = {"schedule": schedule, "achieved_peak_w": peak, "slot_s": problem.slot_s,
              "windows_s": {
                  uid: [[s * problem.slot_s, u.duration_s] for s in starts]
                  for uid, starts in schedule.items()
                  for u in [next(x for x in problem.units if x.unit_id == uid)]
              }}
    print(json.dumps(result, indent=2, sort_keys=True))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        agg = np.asarray(problem.background_w, dtype=float).copy()
        from .coordination import _slot_contribution

        for unit in problem.units:
            base = _slot_contribution(unit.power_template, problem.slot_s, problem.n_slots)
            for s in schedule[unit.unit_id]:
                agg += np.roll(base, s)
        with open(out_dir / "planned_profile.csv", "w", encoding="utf-8") as fh:
            fh.write("t_s,power_w\n")
            for i, v in enumerate(agg):
                fh.write(f"{i * problem.slot_s},{float(v)!r}\n")
    return 0


def _cmd_report(args) -> int:
    report = make_report(args.historian)
    if args.historian2:
        second = make_report(args.historian2)
        print(json.dumps(compare_runs(report, second), indent=2, sort_keys=True))
    else:
        print(report.to_json(), end="")
    if args.out:
        write_report_artifacts(report, Path(args.out))
    return 0


def _cmd_stub(args) -> int:
    stub = StubZoneSimulator(host=args.host, port=args.port,
                             timestep_s=args.timestep, n_steps=args.steps)
    trace = stub.run()
    if trace:
        t, temp, sp = trace[-1]
        print(f"{len(trace)} steps, final t={t:.0f}s zone_T={temp:.3f} setpoint={sp}")
    return 0


COMMANDS = {
    "run": _cmd_run,
    "broker": _cmd_broker,
    "replay": _cmd_replay,
    "plan-defrost": _cmd_plan,
    "report": _cmd_report,
    "cosim-stub": _cmd_stub,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigParse, ConfigInvalid) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (PlugsimError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
