/** Client-side state. Every value here came from the snapshot endpoint or a
 * stream envelope; nothing is synthesized, so the UI can render it verbatim. */

import type {
  DeviceEntry,
  DrEventPayload,
  Envelope,
  ShedLogEntry,
  StateSnapshot,
} from "./types";

export interface DeviceState {
  id: string;
  kind: string;
  points: Map<string, unknown>;
  writable: string[];
}

export interface PowerSample {
  t: number;
  w: number;
}

const SHED_LOG_CAP = 200;

export class ConsoleStore {
  devices = new Map<string, DeviceState>();
  simTimeS = 0;
  mode = "";
  price: number | null = null;
  drActive = new Map<string, DrEventPayload>();
  shedSet = new Set<string>();
  shedLog: ShedLogEntry[] = [];
  series: PowerSample[] = [];

  constructor(readonly windowS: number = 3600) {}

  applySnapshot(snap: StateSnapshot): void {
    this.simTimeS = snap.sim_time_s;
    this.mode = snap.mode;
    this.devices = new Map(
      snap.devices.map((d: DeviceEntry) => [
        d.id,
        {
          id: d.id,
          kind: d.kind,
          points: new Map(Object.entries(d.points)),
          writable: [...d.writable],
        },
      ]),
    );
    this.drActive = new Map(
      snap.active_dr_events
        .filter((e) => typeof e.event_id === "string")
        .map((e) => [e.event_id, e]),
    );
    this.shedSet = new Set(snap.shed_set);
    this.appendSample(this.simTimeS, this.aggregateW());
  }

  applyEnvelope(env: Envelope): void {
    const topic = env.topic ?? "";
    const parts = topic.split("/");
    if (parts[0] === "devices" && parts.length >= 4) {
      const dev = this.devices.get(parts[2]);
      if (dev === undefined) return; // only snapshot-declared devices get cards
      const leaf = parts.slice(3).join("/");
      dev.points.set(leaf, env.payload);
      if (leaf === "power" && typeof env.payload === "number") {
        this.appendSample(this.simTimeS, this.aggregateW());
      }
      return;
    }
    if (topic === "clock/tick") {
      const payload = env.payload as { t?: unknown };
      if (typeof payload?.t === "number") {
        this.simTimeS = payload.t;
        this.appendSample(this.simTimeS, this.aggregateW());
      }
      return;
    }
    if (topic === "dr/price") {
      if (typeof env.payload === "number") this.price = env.payload;
      return;
    }
    if (topic === "dr/events") {
      const ev = env.payload as DrEventPayload;
      if (typeof ev?.event_id !== "string") return;
      if (ev.status === "active") this.drActive.set(ev.event_id, ev);
      else this.drActive.delete(ev.event_id);
      return;
    }
    if (topic === "control/shed") {
      const entry = env.payload as ShedLogEntry;
      if (!Array.isArray(entry?.shed)) return;
      this.shedSet = new Set(entry.shed);
      this.shedLog.push(entry);
      if (this.shedLog.length > SHED_LOG_CAP) {
        this.shedLog.splice(0, this.shedLog.length - SHED_LOG_CAP);
      }
      return;
    }
  }

  /** Sum of the latest power point per device. */
  aggregateW(): number {
    let total = 0;
    for (const dev of this.devices.values()) {
      const p = dev.points.get("power");
      if (typeof p === "number") total += p;
    }
    return total;
  }

  private appendSample(t: number, w: number): void {
    const last = this.series[this.series.length - 1];
    if (last !== undefined && last.t === t) {
      last.w = w;
    } else {
      this.series.push({ t, w });
    }
    const cutoff = t - this.windowS;
    let drop = 0;
    while (drop < this.series.length - 1 && this.series[drop].t < cutoff) drop += 1;
    if (drop > 0) this.series.splice(0, drop);
  }
}
