"""Decision layer: demand-response events, priority load shedding, the
defrost-schedule peak-shaving planner, and load metrics.

All decision functions here are pure; the agents that wrap them live in the
harness wiring. Tie-breaking is lexicographic / earliest-slot everywhere so
results are deterministic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .devices import (
    DAY_S,
    NORMAL,
    DefrostSchedule,
    RefrigeratorParams,
    RefrigeratorState,
    step_refrigerator,
)
from .errors import ConfigInvalid, PlugsimError

DEFAULT_DEMAND_WINDOW_S = 900
DEFAULT_PRICE_PER_KWH = 0.12
PRICE_REPUBLISH_S = 300

RELIABILITY_LEVELS = ("NORMAL", "HIGH", "EMERGENCY")


class Infeasible(PlugsimError):
    """The requested cycles cannot be scheduled within one day."""


class SeriesTooShort(PlugsimError):
    """The series does not span a single demand window."""


# --------------------------------------------------------------------------
# demand response events


@dataclass(frozen=True)
class DemandResponseEvent:
    event_id: str
    start_s: float
    duration_s: float
    price_per_kwh: float
    reliability: str = "NORMAL"
    target_limit_w: float | None = None

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ConfigInvalid("duration_s", "must be positive")
        if self.price_per_kwh < 0:
            raise ConfigInvalid("price_per_kwh", "must be non-negative")
        if self.reliability not in RELIABILITY_LEVELS:
            raise ConfigInvalid("reliability", f"{self.reliability!r} not one of {RELIABILITY_LEVELS}")

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s

    def to_payload(self, status: str) -> dict:
        payload = {
            "event_id": self.event_id,
            "status": status,
            "price_per_kwh": self.price_per_kwh,
            "reliability": self.reliability,
        }
        if self.target_limit_w is not None:
            payload["target_limit_w"] = self.target_limit_w
        return payload

    @classmethod
    def from_payload(cls, obj: dict) -> "DemandResponseEvent":
        try:
            return cls(
                event_id=str(obj["event_id"]),
                start_s=float(obj["start_s"]),
                duration_s=float(obj["duration_s"]),
                price_per_kwh=float(obj["price_per_kwh"]),
                reliability=str(obj.get("reliability", "NORMAL")),
                target_limit_w=(float(obj["target_limit_w"])
                                if obj.get("target_limit_w") is not None else None),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalid("dr_event", f"bad event payload: {exc}") from exc


def validate_events(events: list[DemandResponseEvent]) -> list[DemandResponseEvent]:
    """Sort by start and reject overlapping events with conflicting caps."""
    ordered = sorted(events, key=lambda e: (e.start_s, e.event_id))
    for a, b in itertools.combinations(ordered, 2):
        overlap = a.start_s < b.end_s and b.start_s < a.end_s
        if overlap and a.target_limit_w != b.target_limit_w:
            raise ConfigInvalid(
                "dr_events",
                f"events {a.event_id!r} and {b.event_id!r} overlap with conflicting target_limit_w",
            )
    return ordered


# --------------------------------------------------------------------------
# priority load shedding


@dataclass(frozen=True)
class ShedLoad:
    device_id: str
    enable_topic: str
    priority: int  # lower sheds first
    sheddable: bool = True
    est_power_w: float = 0.0


@dataclass(frozen=True)
class ShedPolicy:
    loads: tuple[ShedLoad, ...]
    limit_w: float
    restore_margin_w: float = 0.0
    restore_hold_s: float = 0.0

    def __post_init__(self):
        if self.limit_w <= 0:
            raise ConfigInvalid("limit_w", "must be positive")
        if self.restore_margin_w < 0:
            raise ConfigInvalid("restore_margin_w", "must be non-negative")
        prios = [l.priority for l in self.loads]
        if len(set(prios)) != len(prios):
            raise ConfigInvalid("loads", "priorities must be unique")


@dataclass(frozen=True)
class ShedState:
    """Which loads are currently shed (in shed order) and how long the
    restore condition has held for the current restore candidate."""

    shed: tuple[str, ...] = ()
    ok_since: float | None = None


def priority_shed(
    policy: ShedPolicy,
    measured_w: float,
    state: ShedState,
    t: float,
    limit_w: float | None = None,
) -> tuple[list[tuple[str, int]], ShedState]:
    """One shed/restore decision; returns only the commands that change state.

    limit_w overrides the policy cap (active DR events lower it). Shedding
    walks sheddable loads in ascending priority until the projection clears
    the cap; restoration goes one load at a time in reverse order, gated by
    restore_margin_w and a restore_hold_s dwell.
    """
    cap = policy.limit_w if limit_w is None else limit_w
    by_id = {l.device_id: l for l in policy.loads}
    commands: list[tuple[str, int]] = []

    if measured_w > cap:
        projected = measured_w
        shed = list(state.shed)
        for load in sorted(policy.loads, key=lambda l: l.priority):
            if projected <= cap:
                break
            if not load.sheddable or load.device_id in state.shed:
                continue
            shed.append(load.device_id)
            commands.append((load.enable_topic, 0))
            projected -= load.est_power_w
        return commands, ShedState(shed=tuple(shed), ok_since=None)

    if state.shed:
        candidate = by_id[state.shed[-1]]
        if measured_w + candidate.est_power_w <= cap - policy.restore_margin_w:
            since = t if state.ok_since is None else state.ok_since
            if t - since >= policy.restore_hold_s:
                commands.append((candidate.enable_topic, 1))
                return commands, ShedState(shed=state.shed[:-1], ok_since=None)
            return commands, replace(state, ok_since=since)
        return commands, replace(state, ok_since=None)

    return commands, state


# --------------------------------------------------------------------------
# power series metrics


@dataclass(frozen=True)
class PowerSeries:
    t0_s: float
    dt_s: float
    values: tuple[float, ...]

    def __post_init__(self):
        if self.dt_s <= 0:
            raise ConfigInvalid("dt_s", "must be positive")
        arr = np.asarray(self.values, dtype=float)
        if arr.size and not np.all(np.isfinite(arr)):
            raise ConfigInvalid("values", "must be finite")

    def energy_kwh(self) -> float:
        return float(np.sum(self.values) * self.dt_s / 3.6e6)


def rolling_peak(series: PowerSeries, window_s: float = DEFAULT_DEMAND_WINDOW_S) -> float:
    """Max over calendar-aligned full windows of mean power (W)."""
    if window_s % series.dt_s != 0:
        raise ConfigInvalid("window_s", "must be a multiple of the series dt")
    per = int(round(window_s / series.dt_s))
    n = len(series.values) // per
    if n == 0:
        raise SeriesTooShort(
            f"series spans {len(series.values) * series.dt_s}s < window {window_s}s")
    arr = np.asarray(series.values[: n * per], dtype=float).reshape(n, per)
    return float(arr.mean(axis=1).max())


def demand_charge(series: PowerSeries, window_s: float, rate_per_kw: float) -> float:
    return rate_per_kw * rolling_peak(series, window_s) / 1000.0


# --------------------------------------------------------------------------
# defrost planning


@dataclass(frozen=True)
class PlanUnit:
    unit_id: str
    cycles_per_day: int
    duration_s: int
    min_gap_s: int
    power_template: tuple[float, ...]  # W per second from window start

    def __post_init__(self):
        if self.cycles_per_day < 1:
            raise ConfigInvalid("cycles_per_day", "must be at least 1")
        if self.min_gap_s < self.duration_s:
            raise ConfigInvalid("min_gap_s", "must be at least the window duration")
        if any(v < 0 for v in self.power_template):
            raise ConfigInvalid("power_template", "must be non-negative")


@dataclass(frozen=True)
class DefrostPlanProblem:
    units: tuple[PlanUnit, ...]
    background_w: tuple[float, ...]  # one mean-W value per slot
    slot_s: int = 1800

    def __post_init__(self):
        if self.slot_s <= 0 or DAY_S % self.slot_s != 0:
            raise ConfigInvalid("slot_s", "must divide 86400")
        if len(self.background_w) != DAY_S // self.slot_s:
            raise ConfigInvalid(
                "background_w",
                f"need {DAY_S // self.slot_s} slot values, got {len(self.background_w)}")
        for u in self.units:
            if u.duration_s % self.slot_s != 0:
                raise ConfigInvalid("duration_s", f"unit {u.unit_id}: must be a multiple of slot_s")

    @property
    def n_slots(self) -> int:
        return DAY_S // self.slot_s


EXHAUSTIVE_GUARD = 10**6


def _slot_contribution(template: tuple[float, ...], slot_s: int, n_slots: int) -> np.ndarray:
    """Mean added W per slot when the cycle starts at slot 0 (wraps past midnight)."""
    contrib = np.zeros(n_slots)
    for offset, watts in enumerate(template):
        contrib[(offset % DAY_S) // slot_s % n_slots] += watts
    return contrib / slot_s


def _feasible_start_tuples(unit: PlanUnit, slot_s: int, n_slots: int) -> list[tuple[int, ...]]:
    """All sorted start-slot tuples honoring the circular start-to-start gap."""
    gap_slots = -(-unit.min_gap_s // slot_s)  # ceil
    k = unit.cycles_per_day
    if k == 1:
        return [(s,) for s in range(n_slots)]
    out = []
    for combo in itertools.combinations(range(n_slots), k):
        gaps_ok = all(b - a >= gap_slots for a, b in zip(combo, combo[1:]))
        wrap_ok = combo[0] + n_slots - combo[-1] >= gap_slots
        if gaps_ok and wrap_ok:
            out.append(combo)
    return out


def _candidate_matrix(unit: PlanUnit, candidates: list[tuple[int, ...]],
                      slot_s: int, n_slots: int) -> np.ndarray:
    base = _slot_contribution(unit.power_template, slot_s, n_slots)
    rolls = np.stack([np.roll(base, s) for s in range(n_slots)])
    return np.stack([rolls[list(cand)].sum(axis=0) for cand in candidates])


def plan_defrost(
    p: DefrostPlanProblem, mode: str = "EXHAUSTIVE"
) -> tuple[dict[str, list[int]], float]:
    """Choose start slots per unit minimizing the slot-peak of
    background + all template contributions. Returns ({unit_id: starts}, peak W)."""
    if mode not in ("EXHAUSTIVE", "GREEDY"):
        raise ConfigInvalid("mode", f"{mode!r} not EXHAUSTIVE or GREEDY")
    n = p.n_slots
    bg = np.asarray(p.background_w, dtype=float)
    per_unit = []
    for unit in p.units:
        cands = _feasible_start_tuples(unit, p.slot_s, n)
        if not cands:
            raise Infeasible(
                f"unit {unit.unit_id}: cannot fit {unit.cycles_per_day} cycles "
                f"with gap {unit.min_gap_s}s in one day")
        per_unit.append(cands)

    if not p.units:
        return {}, float(bg.max()) if len(bg) else 0.0

    if mode == "EXHAUSTIVE":
        total = 1
        for cands in per_unit:
            total *= len(cands)
        if total > EXHAUSTIVE_GUARD:
            raise ConfigInvalid("mode", f"{total} combinations exceed the exhaustive guard")
        return _plan_exhaustive(p, per_unit, bg)
    return _plan_greedy(p, bg)


def _plan_exhaustive(p, per_unit, bg):
    n = p.n_slots
    mats = [
        _candidate_matrix(unit, cands, p.slot_s, n)
        for unit, cands in zip(p.units, per_unit)
    ]
    best_peak = float("inf")
    best_idx: tuple[int, ...] | None = None
    last_mat = mats[-1]

    prefix_lists = [range(len(c)) for c in per_unit[:-1]]
    for prefix in itertools.product(*prefix_lists):
        agg = bg.copy()
        for mat, i in zip(mats[:-1], prefix):
            agg = agg + mat[i]
        peaks = (agg + last_mat).max(axis=1)
        j = int(np.argmin(peaks))  # first occurrence == lexicographic tie-break
        if peaks[j] < best_peak:
            best_peak = float(peaks[j])
            best_idx = prefix + (j,)

    assert best_idx is not None
    schedule = {
        unit.unit_id: list(per_unit[k][best_idx[k]])
        for k, unit in enumerate(p.units)
    }
    return schedule, best_peak


def _plan_greedy(p, bg):
    n = p.n_slots
    order = sorted(
        range(len(p.units)),
        key=lambda i: (-max(p.units[i].power_template, default=0.0), i),
    )
    agg = bg.copy()
    schedule: dict[str, list[int]] = {}
    for i in order:
        unit = p.units[i]
        base = _slot_contribution(unit.power_template, p.slot_s, n)
        rolls = np.stack([np.roll(base, s) for s in range(n)])
        gap_slots = -(-unit.min_gap_s // p.slot_s)
        starts = _greedy_place(unit.cycles_per_day, gap_slots, n, agg, rolls)
        if starts is None:
            raise Infeasible(
                f"unit {unit.unit_id}: cannot fit {unit.cycles_per_day} cycles "
                f"with gap {unit.min_gap_s}s in one day")
        for s in starts:
            agg = agg + rolls[s]
        schedule[unit.unit_id] = sorted(starts)
    schedule = {u.unit_id: schedule[u.unit_id] for u in p.units}
    return schedule, float(agg.max())


def _greedy_place(k: int, gap_slots: int, n: int, agg: np.ndarray,
                  rolls: np.ndarray, placed: tuple[int, ...] = ()) -> list[int] | None:
    """Place k cycles one at a time, each at the slot minimizing the running
    peak (ties earliest); backtracks if a choice strands the remaining cycles."""
    if k == 0:
        return []
    admissible = [
        s for s in range(n)
        if all(_circ_gap(s, q, n) >= gap_slots for q in placed)
    ]
    if not admissible:
        return None
    peaks = [(float((agg + rolls[s]).max()), s) for s in admissible]
    peaks.sort()
    for _, s in peaks:
        rest = _greedy_place(k - 1, gap_slots, n, agg + rolls[s], rolls, placed + (s,))
        if rest is not None:
            return [s] + rest
    return None


def _circ_gap(a: int, b: int, n: int) -> int:
    d = abs(a - b) % n
    return min(d, n - d)


# --------------------------------------------------------------------------
# agents wrapping the decision functions

TOPIC_DR_EVENTS = "dr/events"
TOPIC_DR_PRICE = "dr/price"
TOPIC_DR_INJECT = "dr/inject"
TOPIC_SHED_LOG = "control/shed"


class DrAgent:
    """Publishes demand-response events and the price signal.

    Event activations/endings fire on the first heartbeat at or past their
    boundary; the current price (active event's, else the default) goes out
    on every 300 s boundary. Events can also be injected live by publishing
    an event payload (with start_s/duration_s) to ``dr/inject``.
    """

    def __init__(self, agent, events: list[DemandResponseEvent],
                 default_price: float = DEFAULT_PRICE_PER_KWH,
                 period_s: float = 60.0):
        self.agent = agent
        self.events = validate_events(events)
        self.default_price = default_price
        self._started: set[str] = set()
        self._ended: set[str] = set()
        self.event_log: list[dict] = []
        agent.bind(TOPIC_DR_INJECT, self._on_inject)
        agent.heartbeat(period_s, self._tick)

    def _on_inject(self, env) -> None:
        try:
            event = DemandResponseEvent.from_payload(env.payload)
            self.events = validate_events(self.events + [event])
        except ConfigInvalid as exc:
            self.agent.publish(f"agents/{self.agent.agent_id}/error", str(exc))
            return
        self.agent.log("INFO", f"injected event {event.event_id}")

    def active_events(self, t: float) -> list[DemandResponseEvent]:
        return [e for e in self.events if e.start_s <= t < e.end_s]

    def current_price(self, t: float) -> float:
        active = self.active_events(t)
        if active:
            return max(active, key=lambda e: e.start_s).price_per_kwh
        return self.default_price

    def _tick(self, t: float) -> None:
        changed = False
        for event in self.events:
            if event.event_id not in self._started and t >= event.start_s:
                self._started.add(event.event_id)
                payload = event.to_payload("active")
                self.agent.publish(TOPIC_DR_EVENTS, payload)
                self.event_log.append({"t": t, **payload})
                changed = True
            if (event.event_id in self._started and event.event_id not in self._ended
                    and t >= event.end_s):
                self._ended.add(event.event_id)
                payload = event.to_payload("ended")
                self.agent.publish(TOPIC_DR_EVENTS, payload)
                self.event_log.append({"t": t, **payload})
                changed = True
        if changed or t % PRICE_REPUBLISH_S == 0:
            self.agent.publish(TOPIC_DR_PRICE, self.current_price(t))


class ShedControlAgent:
    """Caches device power points, applies priority_shed each heartbeat, and
    publishes 0/1 commands to the loads' enable topics."""

    def __init__(self, agent, policy: ShedPolicy, period_s: float = 60.0,
                 watch_pattern: str = "devices"):
        self.agent = agent
        self.policy = policy
        self.state = ShedState()
        self.dr_limit_w: float | None = None
        self.power_cache: dict[str, float] = {}
        self.shed_log: list[dict] = []
        agent.bind(watch_pattern, self._on_point)
        agent.bind(TOPIC_DR_EVENTS, self._on_dr)
        agent.heartbeat(period_s, self._tick)

    def _on_point(self, env) -> None:
        topic = env.topic or ""
        if topic.endswith("/power") and isinstance(env.payload, (int, float)) \
                and not isinstance(env.payload, bool):
            self.power_cache[topic] = float(env.payload)

    def _on_dr(self, env) -> None:
        payload = env.payload or {}
        if not isinstance(payload, dict):
            return
        if payload.get("status") == "active" and payload.get("target_limit_w") is not None:
            self.dr_limit_w = float(payload["target_limit_w"])
        elif payload.get("status") == "ended":
            self.dr_limit_w = None

    def measured_w(self) -> float:
        return sum(self.power_cache.values())

    def _tick(self, t: float) -> None:
        cap = self.policy.limit_w
        if self.dr_limit_w is not None:
            cap = min(cap, self.dr_limit_w)
        measured = self.measured_w()
        commands, self.state = priority_shed(self.policy, measured, self.state, t, cap)
        for topic, value in commands:
            self.agent.publish(topic, value)
        if commands:
            entry = {"t": t, "measured_w": measured, "limit_w": cap,
                     "shed": list(self.state.shed)}
            self.shed_log.append(entry)
            self.agent.publish(TOPIC_SHED_LOG, entry)


def schedule_to_windows(starts: list[int], slot_s: int, duration_s: int) -> DefrostSchedule:
    return DefrostSchedule(windows=tuple((s * slot_s, duration_s) for s in sorted(starts)))


def extract_template(
    params: RefrigeratorParams, duration_s: int = 1800, max_s: int = 6 * 3600
) -> tuple[float, ...]:
    """Per-second power of one isolated unit from window start through the end
    of recovery, starting from converged steady cycling."""
    sched = DefrostSchedule(windows=((0, duration_s),))
    none = DefrostSchedule()
    state = RefrigeratorState(T_cab=params.T_high, compressor_on=True, params=params)
    for t in range(DAY_S):  # settle into the thermostat limit cycle
        state, _ = step_refrigerator(state, float(t + 1), 1.0, none)
    trace: list[float] = []
    t = 0.0
    while t < max_s:
        state, power = step_refrigerator(state, t, 1.0, sched)
        trace.append(power)
        if t >= duration_s and state.mode == NORMAL:
            break
        t += 1.0
    return tuple(trace)
