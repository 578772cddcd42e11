"""Run reports: energy, aggregate series, peak, demand charge, event logs.

A report is derived from a historian CSV plus the run_meta.json the harness
writes next to it. Per-device power is reconstructed on the tick grid with
last-value-hold semantics, so the aggregate series is the exact pointwise sum
of the device series and energy is additive by construction.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .coordination import PowerSeries, demand_charge, rolling_peak
from .errors import PlugsimError
from .ingest import read_historian_csv


class EmptyHistorian(PlugsimError):
    """The historian file contains no rows."""


@dataclass
class RunReport:
    device_energy_kwh: dict[str, float]
    aggregate: PowerSeries
    rolling_peak_w: float
    demand_charge: float
    window_s: int
    rate_per_kw: float
    shed_events: list[dict]
    dr_events: list[dict]
    message_counts: dict[str, int]
    meta: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "device_energy_kwh": self.device_energy_kwh,
            "aggregate_energy_kwh": self.aggregate.energy_kwh(),
            "rolling_peak_w": self.rolling_peak_w,
            "demand_charge": self.demand_charge,
            "window_s": self.window_s,
            "rate_per_kw": self.rate_per_kw,
            "shed_events": self.shed_events,
            "dr_events": self.dr_events,
            "message_counts": self.message_counts,
            "series": {
                "t0_s": self.aggregate.t0_s,
                "dt_s": self.aggregate.dt_s,
                "n": len(self.aggregate.values),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _load_meta(meta_path: Path | None) -> dict[str, Any]:
    if meta_path is not None and meta_path.exists():
        return json.loads(meta_path.read_text(encoding="utf-8"))
    return {}


def _device_key(topic: str, meta: dict[str, Any]) -> str:
    base = topic.rsplit("/", 1)[0]
    for dev in meta.get("devices", []):
        if dev.get("base_topic") == base:
            return dev["id"]
    parts = topic.split("/")
    return parts[-2] if len(parts) >= 2 else topic


def make_report(historian_path: str | Path,
                meta_path: str | Path | None = None,
                meta_override: dict[str, Any] | None = None) -> RunReport:
    historian_path = Path(historian_path)
    if meta_override is not None:
        meta = meta_override
    else:
        if meta_path is None:
            candidate = historian_path.parent / "run_meta.json"
            meta_path = candidate if candidate.exists() else None
        meta = _load_meta(Path(meta_path) if meta_path else None)

    rows = read_historian_csv(historian_path)
    if not rows:
        raise EmptyHistorian(f"{historian_path} has no data rows")

    speedup = float(meta.get("speedup", 1.0))
    wall0_ms = meta.get("wall0_ms")

    def sim_t(ts_ms: int) -> float:
        if wall0_ms is not None:
            return (ts_ms - wall0_ms) / 1000.0 * speedup
        return ts_ms / 1000.0

    # per power topic: (sim_t, value) in delivery order
    power_rows: dict[str, list[tuple[float, float]]] = {}
    counts: Counter[str] = Counter()
    for ts_ms, topic, value in rows:
        counts["/".join(topic.split("/")[:2])] += 1
        if topic.endswith("/power"):
            power_rows.setdefault(topic, []).append((sim_t(ts_ms), value))

    t_min = min(sim_t(r[0]) for r in rows)
    t_max = max(sim_t(r[0]) for r in rows)
    start_s = float(meta.get("start_s", t_min))
    end_s = float(meta.get("end_s", t_max))
    dt_s = float(meta.get("timestep_s", 0) or 0)
    if dt_s <= 0:
        dt_s = _infer_dt(power_rows) or 60.0
    n = max(1, int(round((end_s - start_s) / dt_s)))

    device_series: dict[str, list[float]] = {}
    for topic, samples in sorted(power_rows.items()):
        samples.sort(key=lambda s: s[0])
        held = _hold_on_grid(samples, start_s, dt_s, n)
        key = _device_key(topic, meta)
        if key in device_series:  # two topics mapping to one id: sum them
            device_series[key] = [a + b for a, b in zip(device_series[key], held)]
        else:
            device_series[key] = held

    aggregate_values = [0.0] * n
    for series in device_series.values():
        for i, v in enumerate(series):
            aggregate_values[i] += v
    aggregate = PowerSeries(t0_s=start_s, dt_s=dt_s, values=tuple(aggregate_values))

    window_s = int(meta.get("demand_window_s", 900))
    rate = float(meta.get("demand_rate_per_kw", 15.0))
    peak = rolling_peak(aggregate, window_s)

    energy = {
        key: float(sum(series) * dt_s / 3.6e6)
        for key, series in sorted(device_series.items())
    }

    return RunReport(
        device_energy_kwh=energy,
        aggregate=aggregate,
        rolling_peak_w=peak,
        demand_charge=demand_charge(aggregate, window_s, rate),
        window_s=window_s,
        rate_per_kw=rate,
        shed_events=list(meta.get("shed_log", [])),
        dr_events=list(meta.get("dr_log", [])),
        message_counts=dict(sorted(counts.items())),
        meta=meta,
    )


def _infer_dt(power_rows: dict[str, list[tuple[float, float]]]) -> float | None:
    for samples in power_rows.values():
        ts = sorted(t for t, _ in samples)
        diffs = [b - a for a, b in zip(ts, ts[1:]) if b > a]
        if diffs:
            diffs.sort()
            return diffs[len(diffs) // 2]
    return None


def _hold_on_grid(samples: list[tuple[float, float]], start_s: float,
                  dt_s: float, n: int) -> list[float]:
    """Sample a (t, value) sequence on the tick grid with last-value-hold;
    zero before the first sample. Ties at a grid point use the latest row."""
    out = [0.0] * n
    j = 0
    current = 0.0
    eps = dt_s * 1e-6
    for i in range(n):
        t = start_s + i * dt_s
        while j < len(samples) and samples[j][0] <= t + eps:
            current = samples[j][1]
            j += 1
        out[i] = current
    return out


def write_report_artifacts(report: RunReport, out_dir: str | Path,
                           name: str = "report.json") -> Path:
    """Write the JSON summary and one power-trace CSV per device."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / name
    report_path.write_text(report.to_json(), encoding="utf-8")
    agg = report.aggregate
    trace = out_dir / "trace_aggregate.csv"
    with open(trace, "w", encoding="utf-8") as fh:
        fh.write("t_s,power_w\n")
        for i, v in enumerate(agg.values):
            fh.write(f"{agg.t0_s + i * agg.dt_s},{v!r}\n")
    return report_path


def compare_runs(baseline: RunReport, shifted: RunReport) -> dict[str, Any]:
    return {
        "baseline": {"rolling_peak_w": baseline.rolling_peak_w,
                     "demand_charge": baseline.demand_charge,
                     "energy_kwh": baseline.aggregate.energy_kwh()},
        "shifted": {"rolling_peak_w": shifted.rolling_peak_w,
                    "demand_charge": shifted.demand_charge,
                    "energy_kwh": shifted.aggregate.energy_kwh()},
        "peak_delta_w": shifted.rolling_peak_w - baseline.rolling_peak_w,
        "charge_delta": shifted.demand_charge - baseline.demand_charge,
    }
