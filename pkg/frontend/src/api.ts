/** Typed client for the bridge REST endpoints. One base URL, no other state. */

import type { ActionResult, DrInjectForm, StateSnapshot } from "./types";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly body: unknown,
  ) {
    super(`bridge returned ${status}: ${JSON.stringify(body)}`);
    this.name = "ApiError";
  }
}

export class BridgeApi {
  private readonly base: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchImpl(this.base + path, init);
    let body: unknown = null;
    try {
      body = await resp.json();
    } catch {
      body = null;
    }
    if (!resp.ok) throw new ApiError(resp.status, body);
    return body as T;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  state(): Promise<StateSnapshot> {
    return this.request("/api/v1/state");
  }

  device(id: string): Promise<{ id: string; records: unknown[] }> {
    return this.request(`/api/v1/devices/${encodeURIComponent(id)}`);
  }

  /** The only write path for device points. */
  act(topic: string, value: unknown): Promise<ActionResult> {
    return this.post("/api/v1/actions", { topic, value });
  }

  /** The only write path for demand-response events. */
  injectDr(event: DrInjectForm): Promise<ActionResult> {
    return this.post("/api/v1/dr", event);
  }

  report(): Promise<Record<string, unknown>> {
    return this.request("/api/v1/report");
  }
}

/** ws:// endpoint for the live stream matching an http:// base URL. */
export function streamUrl(baseUrl: string): string {
  return baseUrl.replace(/\/+$/, "").replace(/^http/, "ws") + "/api/v1/stream";
}
