import type { FetchLike } from "../src/api";
import type { WsLike } from "../src/stream";
import type { Envelope, StateSnapshot } from "../src/types";

/** Scriptable stand-in for a browser WebSocket. */
export class FakeWs implements WsLike {
  static instances: FakeWs[] = [];
  static reset(): void {
    FakeWs.instances = [];
  }
  static last(): FakeWs {
    const ws = FakeWs.instances[FakeWs.instances.length - 1];
    if (ws === undefined) throw new Error("no FakeWs created yet");
    return ws;
  }

  sent: string[] = [];
  closed = false;
  onopen: (() => void) | null = null;
  onmessage: ((ev: { data: unknown }) => void) | null = null;
  onclose: (() => void) | null = null;
  onerror: ((ev?: unknown) => void) | null = null;

  constructor(readonly url: string) {
    FakeWs.instances.push(this);
  }

  send(data: string): void {
    this.sent.push(data);
  }

  close(): void {
    this.closed = true;
    this.onclose?.();
  }

  open(): void {
    this.onopen?.();
  }

  message(frame: unknown): void {
    const data = typeof frame === "string" ? frame : JSON.stringify(frame);
    this.onmessage?.({ data });
  }

  drop(): void {
    this.onclose?.();
  }
}

export const fakeWsFactory = (url: string): WsLike => new FakeWs(url);

let seq = 0;

export function envelope(topic: string, payload: unknown, over: Partial<Envelope> = {}): Envelope {
  seq += 1;
  return {
    v: 1,
    kind: "PUB",
    topic,
    sender: "test",
    ts_ms: 1_700_000_000_000 + seq,
    payload,
    ...over,
  };
}

export function snapshot(over: Partial<StateSnapshot> = {}): StateSnapshot {
  return {
    sim_time_s: 0,
    mode: "REALTIME",
    devices: [
      {
        id: "ev1",
        kind: "ev_charger",
        points: { power: 0.0, soc_kwh: 0.0, plugged_state: 0.0, enabled_state: 1.0 },
        writable: ["devices/b1/ev1/plugged", "devices/b1/ev1/enabled"],
      },
      {
        id: "wh1",
        kind: "water_heater",
        points: { power: 4500.0, t_tank: 47.2, element_on: 1.0, enabled_state: 1.0 },
        writable: ["devices/b1/wh1/enabled"],
      },
      {
        id: "site",
        kind: "background",
        points: { power: 8000.0 },
        writable: [],
      },
    ],
    active_dr_events: [],
    shed_set: [],
    ...over,
  };
}

export interface RecordedRequest {
  url: string;
  method: string;
  body: unknown;
}

export interface RouteReply {
  status?: number;
  body?: unknown;
}

/** fetch stub: requests are recorded; replies come from the handler. */
export function fetchStub(
  handler: (req: RecordedRequest) => RouteReply,
): { fetchImpl: FetchLike; requests: RecordedRequest[] } {
  const requests: RecordedRequest[] = [];
  const fetchImpl: FetchLike = async (url, init) => {
    const req: RecordedRequest = {
      url,
      method: init?.method ?? "GET",
      body: typeof init?.body === "string" ? JSON.parse(init.body) : null,
    };
    requests.push(req);
    const reply = handler(req);
    return new Response(JSON.stringify(reply.body ?? {}), {
      status: reply.status ?? 200,
      headers: { "Content-Type": "application/json" },
    });
  };
  return { fetchImpl, requests };
}
