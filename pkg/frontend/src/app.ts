/** Wires the HTTP client, stream client, store, and DOM together. All state
 * shown on screen originates from the snapshot endpoint or stream envelopes;
 * all mutations go out through the actions and dr endpoints. */

import { BridgeApi, streamUrl, type FetchLike } from "./api";
import { ConsoleStore } from "./store";
import { backoffMs, StreamClient, type WsFactory } from "./stream";
import { ConsoleUi } from "./ui";

const SUBSCRIBE_PATTERNS = ["devices", "dr", "control", "clock"];

export interface AppOptions {
  fetchImpl?: FetchLike;
  wsFactory?: WsFactory;
  windowS?: number;
}

export class ConsoleApp {
  readonly store: ConsoleStore;
  readonly ui: ConsoleUi;
  private api: BridgeApi | null = null;
  private baseUrl = "";
  private stream: StreamClient | null = null;
  private retryTimer: ReturnType<typeof setTimeout> | null = null;
  private snapshotAttempt = 0;
  private everOpened = false;

  constructor(root: HTMLElement, private readonly opts: AppOptions = {}) {
    this.store = new ConsoleStore(opts.windowS ?? 3600);
    this.ui = new ConsoleUi(root, this.store, {
      onToggle: async (topic, value) => {
        if (this.api === null) throw new Error("not connected");
        await this.api.act(topic, value);
      },
      onInjectDr: async (form) => {
        if (this.api === null) throw new Error("not connected");
        await this.api.injectDr(form);
      },
    });
  }

  async connect(baseUrl: string): Promise<void> {
    this.disconnect();
    this.api = new BridgeApi(baseUrl, this.opts.fetchImpl);
    this.baseUrl = baseUrl;
    await this.loadSnapshot();
  }

  /** Cards need a snapshot first; the stream dials once one has landed. */
  private openStream(): void {
    if (this.stream !== null) return;
    this.stream = new StreamClient(streamUrl(this.baseUrl), SUBSCRIBE_PATTERNS, {
      wsFactory: this.opts.wsFactory,
      onEnvelope: (env) => {
        this.store.applyEnvelope(env);
        this.ui.scheduleRender();
      },
      onStatus: (status) => {
        this.ui.setConnection(status);
        if (status.state === "open") {
          if (this.everOpened) this.resync();
          this.everOpened = true;
        }
      },
    });
    this.stream.start();
  }

  disconnect(): void {
    this.stream?.stop();
    this.stream = null;
    if (this.retryTimer !== null) {
      clearTimeout(this.retryTimer);
      this.retryTimer = null;
    }
    this.everOpened = false;
    this.snapshotAttempt = 0;
  }

  /** Fetch /api/v1/state; on failure show a banner and retry with backoff. */
  private async loadSnapshot(): Promise<void> {
    const api = this.api;
    if (api === null) return;
    try {
      const snap = await api.state();
      this.snapshotAttempt = 0;
      this.store.applySnapshot(snap);
      this.ui.renderNow();
      this.openStream();
    } catch (err) {
      const delay = backoffMs(this.snapshotAttempt, 1000, 15000);
      this.snapshotAttempt += 1;
      this.ui.connectionError(
        `cannot load state (${err instanceof Error ? err.message : String(err)}); ` +
          `retrying in ${(delay / 1000).toFixed(1)} s`,
      );
      this.retryTimer = setTimeout(() => {
        this.retryTimer = null;
        void this.loadSnapshot();
      }, delay);
    }
  }

  /** After a stream outage the missed envelopes are gone; pull a fresh
   * snapshot so the cards are grounded again. */
  private resync(): void {
    this.api
      ?.state()
      .then((snap) => {
        this.store.applySnapshot(snap);
        this.ui.scheduleRender();
      })
      .catch(() => {
        /* stream is up; the next envelopes will still be applied */
      });
  }
}
