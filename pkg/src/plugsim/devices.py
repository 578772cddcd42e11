"""Discrete-time prosumer device models.

Each model is a frozen state value plus a pure step function returning
(next_state, electrical power in W). Consumption is positive; only PV
returns negative power. Integration is explicit Euler; keep dt at or below
60 s (the fastest default time constant is C/UA = 4000 s).
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field, replace
from typing import Sequence

from .errors import PlugsimError

DAY_S = 86400

NORMAL = "NORMAL"
DEFROST = "DEFROST"
RECOVERY = "RECOVERY"

ELECTRIC = "ELECTRIC"
OFF_CYCLE = "OFF_CYCLE"

# numeric encoding used on the bus for the mode point
MODE_CODES = {NORMAL: 0, DEFROST: 1, RECOVERY: 2}
MODE_NAMES = {v: k for k, v in MODE_CODES.items()}


class InvalidParams(PlugsimError):
    """A device parameter set violates its invariants."""


# --------------------------------------------------------------------------
# defrost schedule


@dataclass(frozen=True)
class DefrostSchedule:
    """Daily defrost windows as (start seconds-of-day, duration seconds)."""

    windows: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        spans = []
        for start, dur in self.windows:
            if not (0 <= start < DAY_S):
                raise InvalidParams(f"window start {start} outside [0, {DAY_S})")
            if dur <= 0:
                raise InvalidParams(f"window duration {dur} must be positive")
            spans.append((start, start + dur))
        spans.sort()
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise InvalidParams(f"windows [{a0},{a1}) and [{b0},{b1}) overlap")
        if len(spans) >= 2:
            first, last = spans[0], spans[-1]
            if last[1] > DAY_S and (last[1] - DAY_S) > first[0]:
                raise InvalidParams("last window wraps into the first")

    def in_window(self, t: float) -> bool:
        t_day = t % DAY_S
        for start, dur in self.windows:
            if (t_day - start) % DAY_S < dur:
                return True
        return False

    @classmethod
    def from_payload(cls, payload) -> "DefrostSchedule":
        """Accepts [[start, duration], ...] or {"windows": [...]}."""
        if isinstance(payload, dict):
            payload = payload.get("windows", [])
        if not isinstance(payload, (list, tuple)):
            raise InvalidParams("defrost schedule payload must be a list of [start, duration]")
        windows = []
        for item in payload:
            if not isinstance(item, (list, tuple)) or len(item) != 2:
                raise InvalidParams(f"bad window entry {item!r}")
            windows.append((int(item[0]), int(item[1])))
        return cls(windows=tuple(windows))

    def to_payload(self) -> list[list[int]]:
        return [[s, d] for s, d in self.windows]


# --------------------------------------------------------------------------
# refrigerator


@dataclass(frozen=True)
class RefrigeratorParams:
    C: float = 2.0e5          # J/K
    UA: float = 50.0          # W/K
    T_amb: float = 25.0       # deg C
    Q_cool: float = 3000.0    # W thermal removed while compressor runs
    P_comp: float = 1500.0    # W electrical
    P_heat: float = 2000.0    # W electrical, defrost heater
    P_par: float = 100.0      # W fans and controls
    T_low: float = 2.0
    T_high: float = 4.0
    defrost_kind: str = ELECTRIC

    def __post_init__(self):
        if self.C <= 0 or self.UA <= 0:
            raise InvalidParams("C and UA must be positive")
        if self.T_low >= self.T_high:
            raise InvalidParams("T_low must be below T_high")
        if min(self.Q_cool, self.P_comp, self.P_heat, self.P_par) < 0:
            raise InvalidParams("powers must be non-negative")
        if self.defrost_kind not in (ELECTRIC, OFF_CYCLE):
            raise InvalidParams(f"defrost_kind {self.defrost_kind!r} unknown")


@dataclass(frozen=True)
class RefrigeratorState:
    T_cab: float = 3.0
    compressor_on: bool = False
    mode: str = NORMAL
    params: RefrigeratorParams = field(default_factory=RefrigeratorParams)

    def __post_init__(self):
        if self.mode not in MODE_CODES:
            raise InvalidParams(f"mode {self.mode!r} unknown")
        if self.mode == DEFROST and self.compressor_on:
            raise InvalidParams("compressor must be off during DEFROST")


def step_refrigerator(
    s: RefrigeratorState, t: float, dt: float, sched: DefrostSchedule
) -> tuple[RefrigeratorState, float]:
    """Advance one step starting at sim time t; returns power over [t, t+dt)."""
    if dt <= 0:
        raise InvalidParams("dt must be positive")
    p = s.params
    if sched.in_window(t):
        mode = DEFROST
        comp = False
    elif s.mode in (DEFROST, RECOVERY):
        if s.T_cab <= p.T_low:
            mode = NORMAL
            comp = False
        else:
            mode = RECOVERY
            comp = True
    else:
        mode = NORMAL
        if s.T_cab >= p.T_high:
            comp = True
        elif s.T_cab <= p.T_low:
            comp = False
        else:
            comp = s.compressor_on
    heater = mode == DEFROST and p.defrost_kind == ELECTRIC
    q_heat = p.P_heat if heater else 0.0
    q_cool = p.Q_cool if comp else 0.0
    T_next = s.T_cab + dt / p.C * (p.UA * (p.T_amb - s.T_cab) + q_heat - q_cool)
    power = p.P_par + (p.P_comp if comp else 0.0) + (p.P_heat if heater else 0.0)
    return replace(s, T_cab=T_next, compressor_on=comp, mode=mode), power


# --------------------------------------------------------------------------
# water heater


@dataclass(frozen=True)
class WaterHeaterParams:
    C: float = 4.2e5         # J/K (about 100 L of water)
    UA: float = 8.0          # W/K
    T_amb: float = 20.0
    P_elem: float = 4500.0   # W electrical == W thermal into the tank
    T_low: float = 50.0
    T_high: float = 54.0
    # (start seconds-of-day, duration s, flow-induced thermal loss W)
    draw_profile: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self):
        if self.C <= 0 or self.UA < 0:
            raise InvalidParams("C must be positive, UA non-negative")
        if self.T_low >= self.T_high:
            raise InvalidParams("T_low must be below T_high")
        if self.P_elem < 0:
            raise InvalidParams("P_elem must be non-negative")
        for start, dur, watts in self.draw_profile:
            if dur <= 0 or watts < 0:
                raise InvalidParams(f"bad draw entry ({start}, {dur}, {watts})")

    def draw_at(self, t: float) -> float:
        t_day = t % DAY_S
        total = 0.0
        for start, dur, watts in self.draw_profile:
            if (t_day - start) % DAY_S < dur:
                total += watts
        return total


@dataclass(frozen=True)
class WaterHeaterState:
    T_tank: float = 52.0
    element_on: bool = False
    enabled: bool = True
    params: WaterHeaterParams = field(default_factory=WaterHeaterParams)


def step_water_heater(s: WaterHeaterState, t: float, dt: float) -> tuple[WaterHeaterState, float]:
    if dt <= 0:
        raise InvalidParams("dt must be positive")
    p = s.params
    if not s.enabled:
        on = False
    elif s.T_tank <= p.T_low:
        on = True
    elif s.T_tank >= p.T_high:
        on = False
    else:
        on = s.element_on
    heat = p.P_elem if on else 0.0
    T_next = s.T_tank + dt / p.C * (heat - p.UA * (s.T_tank - p.T_amb) - p.draw_at(t))
    return replace(s, T_tank=T_next, element_on=on), heat


# --------------------------------------------------------------------------
# EV charger


@dataclass(frozen=True)
class EVChargerParams:
    capacity_kwh: float = 60.0
    P_charge: float = 7200.0
    efficiency: float = 0.9

    def __post_init__(self):
        if self.capacity_kwh <= 0:
            raise InvalidParams("capacity_kwh must be positive")
        if self.P_charge < 0:
            raise InvalidParams("P_charge must be non-negative")
        if not (0 < self.efficiency <= 1):
            raise InvalidParams("efficiency must be in (0, 1]")


@dataclass(frozen=True)
class EVChargerState:
    plugged: bool = False
    enabled: bool = True
    soc_kwh: float = 0.0
    params: EVChargerParams = field(default_factory=EVChargerParams)

    def __post_init__(self):
        if not (0 <= self.soc_kwh <= self.params.capacity_kwh + 1e-9):
            raise InvalidParams("soc_kwh outside [0, capacity]")


def step_ev_charger(s: EVChargerState, t: float, dt: float) -> tuple[EVChargerState, float]:
    if dt <= 0:
        raise InvalidParams("dt must be positive")
    p = s.params
    if not (s.plugged and s.enabled and s.soc_kwh < p.capacity_kwh):
        return s, 0.0
    delta_kwh = p.efficiency * p.P_charge * dt / 3.6e6
    if delta_kwh <= 0:
        return s, 0.0
    remaining = p.capacity_kwh - s.soc_kwh
    if delta_kwh >= remaining:
        # partial final step: draw only what tops the battery off
        frac = remaining / delta_kwh
        return replace(s, soc_kwh=p.capacity_kwh), p.P_charge * frac
    return replace(s, soc_kwh=s.soc_kwh + delta_kwh), p.P_charge


# --------------------------------------------------------------------------
# solar PV


def interp_profile(points: Sequence[tuple[float, float]], t: float,
                   outside: float = 0.0) -> float:
    """Piecewise-linear interpolation over (time_s, value) samples; `outside`
    before the first and after the last sample."""
    if not points:
        return outside
    xs = [float(x) for x, _ in points]
    if any(b <= a for a, b in zip(xs, xs[1:])):
        raise InvalidParams("profile sample times must be strictly increasing")
    if t < xs[0] or t > xs[-1]:
        return outside
    i = bisect.bisect_right(xs, t)
    if i == len(xs):
        return float(points[-1][1])
    if i == 0:
        return float(points[0][1])
    x0, y0 = points[i - 1]
    x1, y1 = points[i]
    if t == x0:
        return float(y0)
    return float(y0) + (float(y1) - float(y0)) * (t - float(x0)) / (float(x1) - float(x0))


@dataclass(frozen=True)
class PVState:
    capacity_w: float = 5000.0
    profile: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.capacity_w < 0:
            raise InvalidParams("capacity_w must be non-negative")
        for _, irr in self.profile:
            if not (0 <= irr <= 1):
                raise InvalidParams(f"irradiance {irr} outside [0, 1]")


def step_pv(s: PVState, t: float, dt: float) -> tuple[PVState, float]:
    """PV never changes state; power is negative (production) or zero."""
    if dt <= 0:
        raise InvalidParams("dt must be positive")
    return s, -s.capacity_w * interp_profile(s.profile, t)
