/** Wire shapes exchanged with the bridge. */

export interface Envelope {
  v: number;
  kind: string;
  topic?: string;
  pattern?: string;
  sender: string;
  ts_ms: number;
  headers?: Record<string, string>;
  payload?: unknown;
}

export interface DeviceEntry {
  id: string;
  kind: string;
  /** latest value per point leaf, e.g. {"power": 4500.0} */
  points: Record<string, unknown>;
  /** full topics accepting writes, e.g. ["devices/b1/wh1/enabled"] */
  writable: string[];
}

export interface DrEventPayload {
  event_id: string;
  status?: string;
  price_per_kwh?: number;
  reliability?: string;
  target_limit_w?: number | null;
  [key: string]: unknown;
}

export interface StateSnapshot {
  sim_time_s: number;
  mode: string;
  devices: DeviceEntry[];
  active_dr_events: DrEventPayload[];
  shed_set: string[];
}

export interface DrInjectForm {
  event_id: string;
  start_s: number;
  duration_s: number;
  price_per_kwh: number;
  reliability: string;
  target_limit_w?: number;
}

export interface ShedLogEntry {
  t: number;
  measured_w: number;
  limit_w: number;
  shed: string[];
}

export interface ActionResult {
  accepted: boolean;
  ts_ms: number;
}
