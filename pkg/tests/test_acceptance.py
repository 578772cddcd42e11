"""Acceptance gate: every required behavior checked at its stated budget.

Each test prints one ``[PASS]``/``[FAIL]`` line with the measured wall time;
budgets include the runtime of the full simulations a check depends on.
Long 24 h runs are shared between checks through module-scoped fixtures.
"""

import json
import random
import socket
import time
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pytest

from plugsim.coordination import (
    DefrostPlanProblem,
    PlanUnit,
    ShedLoad,
    ShedPolicy,
    ShedState,
    plan_defrost,
    priority_shed,
)
from plugsim.cosim import CosimGateway, ZoneParams, step_zone, zone_fixed_point
from plugsim.devices import RefrigeratorParams
from plugsim.envelope import (
    FrameKind,
    MessageEnvelope,
    ProtocolError,
    Subscription,
    decode_frame,
    encode_frame,
    error_label,
    route,
)
from plugsim.harness import BASELINE_DEFROST_WINDOWS, run_scenario
from plugsim.ingest import HistorianAgent, ReplayAgent, read_historian_csv
from plugsim.report import make_report, write_report_artifacts
from plugsim.scenario import load_scenario

from planner_oracle import (
    assignment_peak,
    assignment_space,
    candidate_count,
    enumerate_peaks,
)

ROOT = Path(__file__).resolve().parents[1]
FRIDGE = RefrigeratorParams()
P_IDLE = FRIDGE.P_par
P_COOL = FRIDGE.P_par + FRIDGE.P_comp
P_DEFROST = FRIDGE.P_par + FRIDGE.P_heat
WINDOWS = tuple((start, start + dur) for start, dur in BASELINE_DEFROST_WINDOWS)


@contextmanager
def gate(label: str, budget_s: float, carried_s: float = 0.0):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"[FAIL] {label}")
        raise
    elapsed = time.perf_counter() - t0 + carried_s
    verdict = "PASS" if elapsed < budget_s else "FAIL"
    print(f"[{verdict}] {label}: {elapsed:.2f}s (budget {budget_s:.0f}s)")
    assert elapsed < budget_s, f"{label}: {elapsed:.2f}s over the {budget_s:.0f}s budget"


@dataclass
class TimedRun:
    artifacts: object
    out_dir: Path
    elapsed_s: float


def _run(source, out_dir: Path) -> TimedRun:
    t0 = time.perf_counter()
    artifacts = run_scenario(load_scenario(source), out_dir)
    return TimedRun(artifacts, out_dir, time.perf_counter() - t0)


@pytest.fixture(scope="module")
def electric_run(tmp_path_factory):
    return _run(ROOT / "scenarios" / "baseline.json",
                tmp_path_factory.mktemp("electric"))


@pytest.fixture(scope="module")
def electric_rerun(tmp_path_factory):
    return _run(ROOT / "scenarios" / "baseline.json",
                tmp_path_factory.mktemp("electric-rerun"))


@pytest.fixture(scope="module")
def offcycle_run(tmp_path_factory):
    obj = json.loads((ROOT / "scenarios" / "baseline.json").read_text())
    obj["devices"][0]["params"]["defrost_kind"] = "OFF_CYCLE"
    return _run(obj, tmp_path_factory.mktemp("offcycle"))


@pytest.fixture(scope="module")
def shifted_run(tmp_path_factory):
    return _run(ROOT / "scenarios" / "shifted.json",
                tmp_path_factory.mktemp("shifted"))


def fridge_samples(run: TimedRun, point: str = "power") -> dict[int, float]:
    topic = f"devices/b1/fridge1/{point}"
    return {ts // 1000: value
            for ts, t, value in read_historian_csv(run.artifacts.historian_path)
            if t == topic}


# -- wire protocol ---------------------------------------------------------


def _random_envelope(rng: random.Random) -> MessageEnvelope:
    alphabet = "abcdefgHIJK0189_.-"

    def segment() -> str:
        return "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 8)))

    def topic() -> str:
        return "/".join(segment() for _ in range(rng.randint(1, 5)))

    def payload(depth: int = 0):
        kinds = ["null", "bool", "int", "float", "str"]
        if depth < 2:
            kinds += ["list", "dict"]
        k = rng.choice(kinds)
        if k == "null":
            return None
        if k == "bool":
            return rng.random() < 0.5
        if k == "int":
            return rng.randint(-10**9, 10**9)
        if k == "float":
            return rng.uniform(-1e6, 1e6)
        if k == "str":
            return rng.choice(["", "plain", "uni°code π", "with spaces\tand tabs",
                               segment()])
        if k == "list":
            return [payload(depth + 1) for _ in range(rng.randint(0, 4))]
        return {segment(): payload(depth + 1) for _ in range(rng.randint(0, 4))}

    headers = {segment(): segment() for _ in range(rng.randint(0, 3))}
    kind = rng.choice([FrameKind.PUB] * 5 + [FrameKind.SUB, FrameKind.UNSUB,
                                             FrameKind.PING, FrameKind.PONG,
                                             FrameKind.ERR])
    common = dict(sender=segment(), ts_ms=rng.randint(0, 2**41), headers=headers)
    if kind is FrameKind.PUB:
        return MessageEnvelope(kind=kind, topic=topic(), payload=payload(), **common)
    if kind in (FrameKind.SUB, FrameKind.UNSUB):
        return MessageEnvelope(kind=kind, pattern=topic(), **common)
    if kind is FrameKind.ERR:
        return MessageEnvelope(kind=kind, payload={"error": segment()}, **common)
    return MessageEnvelope(kind=kind, **common)


def _mutators():
    def rekey(line: bytes, **changes) -> bytes:
        obj = json.loads(line)
        for key, value in changes.items():
            if value is _DROP:
                obj.pop(key, None)
            else:
                obj[key] = value
        return json.dumps(obj).encode() + b"\n"

    return [
        lambda s: s[:-1],                          # newline lost
        lambda s: s[: max(2, len(s) // 2)] + b"\n",  # truncated mid-object
        lambda s: b"not json at all\n",
        lambda s: b"[1,2,3]\n",
        lambda s: b'"just a string"\n',
        lambda s: b"\xff\xfe\x00\n",
        lambda s: b"\n",
        lambda s: s[: len(s) // 2] + b"\n" + s[len(s) // 2:],  # embedded newline
        lambda s: rekey(s, v=_DROP),
        lambda s: rekey(s, v=99),
        lambda s: rekey(s, v="1"),
        lambda s: rekey(s, v=True),
        lambda s: rekey(s, kind="NOPE"),
        lambda s: rekey(s, kind=_DROP),
        lambda s: rekey(s, sender=_DROP),
        lambda s: rekey(s, sender=7),
        lambda s: rekey(s, sender=""),
        lambda s: rekey(s, ts_ms=1.5),
        lambda s: rekey(s, headers=[1]),
        lambda s: rekey(s, headers={"k": 3}),
        lambda s: rekey(s, kind="PUB", topic="a//b"),
        lambda s: rekey(s, kind="PUB", topic=""),
        lambda s: rekey(s, kind="PUB", topic="a b"),
        lambda s: rekey(s, kind="PUB", topic="a", pattern="x"),
        lambda s: rekey(s, kind="PING", topic="a"),
        lambda s: rekey(s, kind="SUB", pattern=_DROP, topic=_DROP),
        lambda s: rekey(s, kind="SUB", pattern="a//b", topic=_DROP),
        lambda s: rekey(s, topic=17),
        lambda s: rekey(s, pattern=17),
    ]


_DROP = object()


def test_envelope_round_trip_and_mutation_classification():
    with gate("wire format: 10k round trips, 100 mutations classified", 5.0):
        rng = random.Random(0xC0FFEE)
        for _ in range(10_000):
            env = _random_envelope(rng)
            assert decode_frame(encode_frame(env)) == env

        mutators = _mutators()
        labels = set()
        for i in range(100):
            base = encode_frame(MessageEnvelope(
                kind=FrameKind.PUB, sender=f"s{i}", ts_ms=i,
                topic="devices/b1/x/power", payload=i))
            mutant = mutators[i % len(mutators)](base)
            with pytest.raises(ProtocolError) as err:
                decode_frame(mutant)
            labels.add(error_label(err.value))
        assert labels <= {"MalformedFrame", "InvalidEnvelope", "UnsupportedVersion"}
        assert labels == {"MalformedFrame", "InvalidEnvelope", "UnsupportedVersion"}


def test_routing_matches_bruteforce_oracle(make_agent):
    with gate("routing: 500-message fuzz equals route() oracle", 10.0):
        rng = random.Random(0x5EED)
        alphabet = "abcd"

        def rand_topic(max_depth: int) -> str:
            return "/".join(rng.choice(alphabet)
                            for _ in range(rng.randint(1, max_depth)))

        subscriber_ids = [f"sub{i}" for i in range(5)]
        patterns = {aid: [] for aid in subscriber_ids}
        patterns["sub0"] = ["a", "a/b"]  # guaranteed overlap: dedup exercised
        pool = [p for p in (rand_topic(2) for _ in range(40))]
        i = 0
        while sum(len(v) for v in patterns.values()) < 20:
            patterns[subscriber_ids[i % 5]].append(pool[i])
            i += 1

        received = {aid: [] for aid in subscriber_ids}
        agents = {}
        subs_oracle = []
        for aid in subscriber_ids:
            agent = make_agent(aid, kind="control")
            agent.on_delivery(
                lambda env, log=received[aid]: log.append((env.topic, env.payload)))
            for pattern in patterns[aid]:
                agent.subscribe(pattern)
                subs_oracle.append(Subscription(pattern, aid))
            agent.flush()
            agents[aid] = agent

        publisher = make_agent("pub", kind="control")
        expected = {aid: [] for aid in subscriber_ids}
        for seq in range(500):
            topic = rand_topic(4)
            publisher.publish(topic, seq)
            env = MessageEnvelope(kind=FrameKind.PUB, sender="pub",
                                  topic=topic, payload=seq)
            for sub_id, _ in route(env, subs_oracle):
                expected[sub_id].append((topic, seq))

        for aid in subscriber_ids:
            agents[aid].flush()
            agents[aid].drain()
        assert received == expected


# -- defrost behavior over a full day --------------------------------------


def test_defrost_heater_exactly_inside_windows(electric_run, offcycle_run):
    carried = electric_run.elapsed_s + offcycle_run.elapsed_s
    with gate("defrost: heater exactly inside windows, then recovery spike",
              30.0, carried):
        power_e = fridge_samples(electric_run)
        mode_e = fridge_samples(electric_run, "mode")
        assert len(power_e) == 1440
        for t, p in power_e.items():
            in_window = any(a <= t < b for a, b in WINDOWS)
            assert (p == P_DEFROST) == in_window, f"electric power {p} at t={t}"
            assert (mode_e[t] == 1.0) == in_window, f"electric mode at t={t}"

        power_o = fridge_samples(offcycle_run)
        mode_o = fridge_samples(offcycle_run, "mode")
        assert len(power_o) == 1440
        assert all(p in (P_IDLE, P_COOL) for p in power_o.values())
        for a, b in WINDOWS:
            for t in range(a, b, 60):
                assert power_o[t] == P_IDLE, f"off-cycle power at t={t}"
                assert mode_o[t] == 1.0

        for _, end in WINDOWS:
            for samples in (power_e, power_o):
                spike = [samples[end + k * 60] for k in range(5)]
                assert all(p >= P_COOL for p in spike), f"no spike after {end}"


def test_electric_defrost_uses_more_energy(electric_run, offcycle_run):
    carried = electric_run.elapsed_s + offcycle_run.elapsed_s
    with gate("defrost: electric daily kWh strictly above off-cycle",
              30.0, carried):
        kwh = {}
        for name, run in (("electric", electric_run), ("offcycle", offcycle_run)):
            report = make_report(run.artifacts.historian_path,
                                 run.artifacts.meta_path)
            kwh[name] = report.device_energy_kwh["fridge1"]
        assert kwh["electric"] > kwh["offcycle"]


def test_shifted_schedule_shaves_peak(electric_run, shifted_run):
    carried = electric_run.elapsed_s + shifted_run.elapsed_s
    with gate("peak shaving: shifted windows cut 15-min peak and charge",
              60.0, carried):
        baseline = make_report(electric_run.artifacts.historian_path,
                               electric_run.artifacts.meta_path)
        shifted = make_report(shifted_run.artifacts.historian_path,
                              shifted_run.artifacts.meta_path)
        assert baseline.window_s == 900
        assert shifted.rolling_peak_w <= baseline.rolling_peak_w
        assert shifted.demand_charge <= baseline.demand_charge


def test_lockstep_runs_are_byte_identical(electric_run, electric_rerun):
    carried = electric_run.elapsed_s + electric_rerun.elapsed_s
    with gate("determinism: repeated run matches byte for byte", 60.0, carried):
        first = electric_run.artifacts.historian_path.read_bytes()
        second = electric_rerun.artifacts.historian_path.read_bytes()
        assert first == second
        for run in (electric_run, electric_rerun):
            report = make_report(run.artifacts.historian_path,
                                 run.artifacts.meta_path)
            write_report_artifacts(report, run.out_dir)
        assert (electric_run.out_dir / "report.json").read_bytes() == \
            (electric_rerun.out_dir / "report.json").read_bytes()


# -- planners ---------------------------------------------------------------


def _random_plan_problem(rng: random.Random) -> DefrostPlanProblem:
    slot_s = 1800
    while True:
        units = []
        for i in range(rng.randint(1, 3)):
            duration_s = slot_s * rng.randint(1, 2)
            watts = float(rng.choice((1000, 1500, 2000, 3000)))
            units.append(PlanUnit(
                unit_id=f"u{i}",
                cycles_per_day=rng.randint(1, 2),
                duration_s=duration_s,
                min_gap_s=max(duration_s, slot_s * rng.randint(1, 16)),
                power_template=(watts,) * duration_s,
            ))
        background = tuple(float(rng.randrange(0, 20001, 500)) for _ in range(48))
        problem = DefrostPlanProblem(units=tuple(units), background_w=background,
                                     slot_s=slot_s)
        count = candidate_count(problem)
        if 0 < count <= 100_000:
            return problem


def test_planner_against_enumeration_oracle():
    with gate("planner: exhaustive beats every candidate, greedy never beats it",
              120.0):
        rng = random.Random(0xBEEF)
        for _ in range(100):
            problem = _random_plan_problem(rng)
            space = assignment_space(problem)
            feasible = [set(tuples) for tuples, _ in space]

            def starts_of(schedule):
                return [schedule[u.unit_id] for u in problem.units]

            schedule_ex, peak_ex = plan_defrost(problem, "EXHAUSTIVE")
            _, peaks = enumerate_peaks(problem)
            assert (peak_ex <= peaks).all()
            assert peak_ex == assignment_peak(problem, starts_of(schedule_ex))
            for i, unit in enumerate(problem.units):
                assert tuple(schedule_ex[unit.unit_id]) in feasible[i]

            schedule_g, peak_g = plan_defrost(problem, "GREEDY")
            assert peak_g >= peak_ex
            assert peak_g == assignment_peak(problem, starts_of(schedule_g))
            for i, unit in enumerate(problem.units):
                assert tuple(schedule_g[unit.unit_id]) in feasible[i]


def _minimal_prefix(policy: ShedPolicy, measured_w: float, cap: float) -> tuple:
    ordered = [l for l in sorted(policy.loads, key=lambda l: l.priority)
               if l.sheddable]
    best = tuple(l.device_id for l in ordered)
    for k in range(len(ordered) + 1):
        projected = measured_w
        for load in ordered[:k]:
            projected -= load.est_power_w
        if projected <= cap:
            best = tuple(l.device_id for l in ordered[:k])
            break
    return best


def test_shed_minimal_prefix_and_monotone_limit():
    with gate("shedding: minimal prefix on 50 instances, monotone in the cap",
              5.0):
        rng = random.Random(0xFACE)
        for _ in range(50):
            n = rng.randint(1, 6)
            loads = tuple(
                ShedLoad(device_id=f"d{i}",
                         enable_topic=f"devices/b1/d{i}/enabled",
                         priority=i + 1,
                         sheddable=rng.random() > 0.2,
                         est_power_w=float(rng.randrange(500, 6001, 250)))
                for i in range(n))
            limit = float(rng.randrange(2000, 20001, 500))
            policy = ShedPolicy(loads=loads, limit_w=limit,
                                restore_margin_w=500.0, restore_hold_s=300.0)
            measured = float(rng.randrange(1000, 40001, 250))

            commands, state = priority_shed(policy, measured, ShedState(), t=0.0)
            assert state.shed == _minimal_prefix(policy, measured, limit)
            assert commands == [(f"devices/b1/{d}/enabled", 0) for d in state.shed]

            previous = None
            for cap in sorted(rng.randrange(1000, 40001, 500) for _ in range(5)):
                _, s = priority_shed(policy, measured, ShedState(), t=0.0,
                                     limit_w=float(cap))
                if previous is not None:
                    assert set(s.shed) <= set(previous)
                previous = s.shed


# -- co-simulation ----------------------------------------------------------


class _CosimClient:
    def __init__(self, port: int):
        self.sock = socket.create_connection(("127.0.0.1", port), timeout=10.0)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._buf = bytearray()

    def send(self, obj: dict) -> None:
        self.sock.sendall(json.dumps(obj).encode() + b"\n")

    def recv(self) -> dict:
        self.sock.settimeout(10.0)
        while b"\n" not in self._buf:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ConnectionError("gateway closed")
            self._buf.extend(chunk)
        nl = self._buf.find(b"\n")
        line = bytes(self._buf[: nl])
        del self._buf[: nl + 1]
        return json.loads(line)

    def close(self) -> None:
        self.sock.close()


def test_cosim_session_full_day(make_agent):
    with gate("co-sim: 1440 steps, bus setpoint at t=3600, fixed-point converge",
              20.0):
        in_topic = "cosim/zone1/cool_setpoint"
        agent = make_agent("gw", kind="cosim")
        gateway = CosimGateway(
            agent,
            output_topic_map={"zone_T": "cosim/zone1/zone_T"},
            input_topic_map={in_topic: "cool_setpoint"},
            input_defaults={"cool_setpoint": 22.0},
            port=0)
        gateway.start()
        agent.flush()
        writer = make_agent("operator", kind="control")

        params = ZoneParams()
        temperature = params.T0
        controls: dict[float, float] = {}
        client = _CosimClient(gateway.port)
        try:
            client.send({"kind": "HELLO", "contract": {
                "sim_id": "zone1", "outputs": ["zone_T"],
                "inputs": ["cool_setpoint"], "timestep_s": 60.0}})
            assert client.recv()["kind"] == "HELLO_ACK"

            steps = 0
            for k in range(1440):
                t = 60.0 * k
                if t == 3600.0:
                    writer.publish(in_topic, 21.0)
                client.send({"kind": "STEP", "t": t,
                             "values": {"zone_T": temperature}})
                steps += 1
                frame = client.recv()
                assert frame["kind"] == "CONTROL" and frame["t"] == t
                setpoint = frame["values"]["cool_setpoint"]
                controls[t] = setpoint
                temperature = step_zone(temperature, setpoint, 60.0, params)
            client.send({"kind": "END"})
        finally:
            client.close()
            gateway.stop()

        assert steps == len(controls) == 1440
        stats = gateway.last_session
        assert stats is not None and stats.clean
        assert stats.steps == stats.controls == 1440
        assert all(sp == 22.0 for t, sp in controls.items() if t < 3600.0)
        assert controls[3600.0] == 21.0
        assert all(sp == 21.0 for t, sp in controls.items() if t >= 3600.0)
        assert abs(temperature - zone_fixed_point(params, 21.0)) < 0.1


# -- ingest round trip -------------------------------------------------------


def test_replay_to_historian_reproduces_rows(make_agent, tmp_path):
    with gate("ingest: 10k-row replay reproduced exactly by the historian",
              10.0):
        rng = random.Random(0xD00D)
        topics = [f"devices/b{b}/m{m}/power" for b in range(1, 5)
                  for m in range(1, 3)]
        stamps = sorted(rng.randrange(0, 600_000) for _ in range(10_000))
        rows = [(ts, rng.choice(topics), rng.uniform(-1e4, 1e4))
                for ts in stamps]
        src = tmp_path / "replay.csv"
        src.write_text("ts_ms,topic,value\n" + "".join(
            f"{ts},{topic},{value!r}\n" for ts, topic, value in rows))

        replay_agent = make_agent("replay", kind="csv-replay", heartbeat_s=60.0)
        replay = ReplayAgent(replay_agent, src)
        recorder = make_agent("recorder", kind="historian")
        historian = HistorianAgent(recorder, ["devices"], tmp_path / "hist.csv")
        recorder.flush()

        for t in range(0, 601, 60):
            replay_agent.fire_heartbeats(float(t))
            recorder.flush()
            recorder.drain()
        assert replay.done()
        historian.close()

        assert read_historian_csv(tmp_path / "hist.csv") == rows
