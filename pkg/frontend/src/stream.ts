/** WebSocket stream client: subscribe once on open, hand PUB envelopes to the
 * store, reconnect with capped exponential backoff when the socket drops. */

import type { Envelope } from "./types";

export interface WsLike {
  onopen: (() => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  send(data: string): void;
  close(): void;
}

export type WsFactory = (url: string) => WsLike;

export interface StreamStatus {
  state: "connecting" | "open" | "retrying";
  /** set while retrying */
  retryInMs?: number;
  attempt?: number;
}

export interface StreamOptions {
  onEnvelope: (env: Envelope) => void;
  onStatus?: (status: StreamStatus) => void;
  wsFactory?: WsFactory;
  backoffBaseMs?: number;
  backoffCapMs?: number;
}

const defaultFactory: WsFactory = (url) =>
  new (globalThis as { WebSocket: new (url: string) => WsLike }).WebSocket(url);

export function backoffMs(attempt: number, baseMs: number, capMs: number): number {
  return Math.min(capMs, baseMs * 2 ** attempt);
}

export class StreamClient {
  private ws: WsLike | null = null;
  private timer: ReturnType<typeof setTimeout> | null = null;
  private attempt = 0;
  private stopped = false;

  constructor(
    private readonly url: string,
    private readonly patterns: string[],
    private readonly opts: StreamOptions,
  ) {}

  start(): void {
    this.stopped = false;
    this.connect();
  }

  stop(): void {
    this.stopped = true;
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    this.ws?.close();
    this.ws = null;
  }

  private connect(): void {
    this.opts.onStatus?.({ state: "connecting", attempt: this.attempt });
    const factory = this.opts.wsFactory ?? defaultFactory;
    const ws = factory(this.url);
    this.ws = ws;
    ws.onopen = () => {
      this.attempt = 0;
      ws.send(JSON.stringify({ op: "subscribe", patterns: this.patterns }));
      this.opts.onStatus?.({ state: "open" });
    };
    ws.onmessage = (ev) => this.handle(ev.data);
    ws.onerror = () => {
      /* a close always follows; reconnect happens there */
    };
    ws.onclose = () => {
      if (this.ws === ws) this.ws = null;
      this.scheduleReconnect();
    };
  }

  private handle(data: unknown): void {
    const text = typeof data === "string" ? data : String(data);
    let env: Envelope;
    try {
      env = JSON.parse(text) as Envelope;
    } catch {
      return;
    }
    // PINGs keep the socket warm; error acks carry no state
    if (env.kind === "PUB" && typeof env.topic === "string") {
      this.opts.onEnvelope(env);
    }
  }

  private scheduleReconnect(): void {
    if (this.stopped || this.timer !== null) return;
    const delay = backoffMs(
      this.attempt,
      this.opts.backoffBaseMs ?? 1000,
      this.opts.backoffCapMs ?? 15000,
    );
    this.attempt += 1;
    this.opts.onStatus?.({ state: "retrying", retryInMs: delay, attempt: this.attempt });
    this.timer = setTimeout(() => {
      this.timer = null;
      if (!this.stopped) this.connect();
    }, delay);
  }
}
