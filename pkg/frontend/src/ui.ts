/** DOM rendering for the operator console.
 *
 * Point values are rendered with String(value), byte-for-byte what the wire
 * delivered. Toggle buttons exist only for topics the bridge declared
 * writable; an optimistic press changes the button alone and is rolled back
 * if the write is rejected, so no device point ever shows a made-up value.
 */

import { drawChart } from "./chart";
import type { ConsoleStore, DeviceState } from "./store";
import type { StreamStatus } from "./stream";
import type { DrInjectForm } from "./types";

export interface UiCallbacks {
  onToggle: (topic: string, value: number) => Promise<void>;
  onInjectDr: (form: DrInjectForm) => Promise<void>;
}

interface PendingWrite {
  desired: number;
  expiresAtMs: number;
}

const PENDING_TTL_MS = 10_000;
const SHED_ROWS_SHOWN = 20;
const RELIABILITY_CHOICES = ["NORMAL", "HIGH", "EMERGENCY"];

export function asFlag(value: unknown): 0 | 1 | null {
  if (typeof value === "boolean") return value ? 1 : 0;
  if (typeof value === "number") return value >= 0.5 ? 1 : 0;
  return null;
}

function fmtSimTime(t: number): string {
  const s = Math.floor(t % 60);
  const m = Math.floor((t / 60) % 60);
  const h = Math.floor(t / 3600);
  return `${h}:${String(m).padStart(2, "0")}:${String(s).padStart(2, "0")}`;
}

export class ConsoleUi {
  private pending = new Map<string, PendingWrite>();
  private renderQueued = false;
  private bannerTimer: ReturnType<typeof setInterval> | null = null;
  private retryAtMs: number | null = null;
  private connState: StreamStatus["state"] | "idle" = "idle";
  private injectSeq = 0;

  constructor(
    private readonly root: HTMLElement,
    private readonly store: ConsoleStore,
    private readonly cb: UiCallbacks,
  ) {
    this.buildSkeleton();
  }

  private el<T extends HTMLElement>(role: string): T {
    return this.root.querySelector(`[data-role="${role}"]`) as T;
  }

  private buildSkeleton(): void {
    this.root.innerHTML = `
      <div class="banner" data-role="banner" hidden></div>
      <div class="statusline">
        <span data-role="conn">idle</span>
        <span data-role="simtime"></span>
        <span data-role="mode"></span>
        <span data-role="price"></span>
      </div>
      <section class="chart-box">
        <h2>Aggregate power</h2>
        <canvas data-role="chart" width="640" height="160"></canvas>
      </section>
      <section>
        <h2>Devices</h2>
        <div class="cards" data-role="cards"></div>
      </section>
      <section class="dr-box">
        <h2>Demand response</h2>
        <div data-role="dr-active"></div>
        <form data-role="dr-form">
          <input name="event_id" placeholder="event id" size="10">
          <input name="start_s" value="0" size="6" title="start_s">
          <input name="duration_s" value="900" size="6" title="duration_s">
          <input name="price_per_kwh" value="0.45" size="6" title="price_per_kwh">
          <select name="reliability">
            ${RELIABILITY_CHOICES.map((r) => `<option>${r}</option>`).join("")}
          </select>
          <input name="target_limit_w" placeholder="limit W (optional)" size="10">
          <button type="submit">Inject event</button>
        </form>
      </section>
      <section>
        <h2>Shed log</h2>
        <table data-role="shed-log"></table>
      </section>
      <div class="toasts" data-role="toasts"></div>
    `;
    const form = this.el<HTMLFormElement>("dr-form");
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      this.submitDr(form);
    });
  }

  scheduleRender(): void {
    if (this.renderQueued) return;
    this.renderQueued = true;
    setTimeout(() => {
      this.renderQueued = false;
      this.renderNow();
    }, 0);
  }

  renderNow(): void {
    const store = this.store;
    this.el("simtime").textContent = `sim ${fmtSimTime(store.simTimeS)}`;
    this.el("mode").textContent = store.mode;
    this.el("price").textContent =
      store.price !== null ? `price ${String(store.price)} /kWh` : "";
    this.renderCards();
    this.renderDrActive();
    this.renderShedLog();
    drawChart(this.el<HTMLCanvasElement>("chart"), store.series, store.windowS);
  }

  private renderCards(): void {
    const host = this.el("cards");
    host.textContent = "";
    const now = Date.now();
    for (const dev of this.store.devices.values()) {
      host.appendChild(this.card(dev, now));
    }
  }

  private card(dev: DeviceState, nowMs: number): HTMLElement {
    const art = document.createElement("article");
    art.className = "card";
    art.dataset.deviceId = dev.id;

    const head = document.createElement("h3");
    head.textContent = `${dev.id} (${dev.kind})`;
    if (this.store.shedSet.has(dev.id)) {
      const badge = document.createElement("span");
      badge.className = "shed-badge";
      badge.dataset.shed = "1";
      badge.textContent = "SHED";
      head.appendChild(badge);
    }
    art.appendChild(head);

    const dl = document.createElement("dl");
    for (const [leaf, value] of [...dev.points.entries()].sort()) {
      const dt = document.createElement("dt");
      dt.textContent = leaf;
      const dd = document.createElement("dd");
      dd.dataset.point = leaf;
      dd.textContent = String(value);
      dl.appendChild(dt);
      dl.appendChild(dd);
    }
    art.appendChild(dl);

    for (const topic of dev.writable) {
      const parts = topic.split("/");
      if (parts[2] !== dev.id) continue;
      const leaf = parts.slice(3).join("/");
      const stateVal = dev.points.get(`${leaf}_state`);
      const actual = asFlag(stateVal);
      if (actual === null) {
        const badge = document.createElement("span");
        badge.className = "writable-badge";
        badge.textContent = `writable: ${leaf}`;
        art.appendChild(badge);
        continue;
      }
      art.appendChild(this.toggle(topic, leaf, actual, nowMs));
    }
    return art;
  }

  private toggle(topic: string, leaf: string, actual: 0 | 1, nowMs: number): HTMLElement {
    const pend = this.pending.get(topic);
    if (pend !== undefined && (pend.desired === actual || nowMs > pend.expiresAtMs)) {
      this.pending.delete(topic);
    }
    const shown = this.pending.get(topic)?.desired ?? actual;
    const btn = document.createElement("button");
    btn.type = "button";
    btn.dataset.writeToggle = topic;
    btn.dataset.state = String(shown);
    if (this.pending.has(topic)) btn.dataset.pending = "1";
    btn.textContent = `${leaf}: ${shown === 1 ? "on" : "off"}`;
    btn.addEventListener("click", () => this.pressToggle(topic, actual));
    return btn;
  }

  private pressToggle(topic: string, actual: 0 | 1): void {
    const desired = actual === 1 ? 0 : 1;
    this.pending.set(topic, { desired, expiresAtMs: Date.now() + PENDING_TTL_MS });
    this.renderNow();
    this.cb.onToggle(topic, desired).catch((err: unknown) => {
      this.pending.delete(topic);
      this.toast(`write to ${topic} rejected: ${errText(err)}`);
      this.renderNow();
    });
  }

  private renderDrActive(): void {
    const host = this.el("dr-active");
    host.textContent = "";
    if (this.store.drActive.size === 0) {
      host.textContent = "no active events";
      return;
    }
    for (const ev of this.store.drActive.values()) {
      const div = document.createElement("div");
      div.className = "dr-event";
      div.dataset.eventId = ev.event_id;
      const bits = [
        ev.event_id,
        String(ev.reliability ?? ""),
        `price ${String(ev.price_per_kwh ?? "")}`,
      ];
      if (ev.target_limit_w !== undefined) bits.push(`limit ${String(ev.target_limit_w)} W`);
      div.textContent = bits.join(" | ");
      host.appendChild(div);
    }
  }

  private renderShedLog(): void {
    const table = this.el<HTMLTableElement>("shed-log");
    table.textContent = "";
    const rows = this.store.shedLog.slice(-SHED_ROWS_SHOWN).reverse();
    for (const row of rows) {
      const tr = document.createElement("tr");
      for (const cell of [
        fmtSimTime(row.t),
        String(row.measured_w),
        String(row.limit_w),
        row.shed.join(", ") || "(none)",
      ]) {
        const td = document.createElement("td");
        td.textContent = cell;
        tr.appendChild(td);
      }
      table.appendChild(tr);
    }
  }

  private submitDr(form: HTMLFormElement): void {
    const field = (name: string): string =>
      (form.elements.namedItem(name) as HTMLInputElement | HTMLSelectElement).value.trim();
    this.injectSeq += 1;
    const payload: DrInjectForm = {
      event_id: field("event_id") || `op-${this.injectSeq}`,
      start_s: Number(field("start_s")),
      duration_s: Number(field("duration_s")),
      price_per_kwh: Number(field("price_per_kwh")),
      reliability: field("reliability"),
    };
    const limit = field("target_limit_w");
    if (limit !== "") payload.target_limit_w = Number(limit);
    const numeric = [payload.start_s, payload.duration_s, payload.price_per_kwh,
                     payload.target_limit_w ?? 0];
    if (numeric.some((n) => Number.isNaN(n))) {
      this.toast("event fields must be numeric");
      return;
    }
    this.cb.onInjectDr(payload)
      .then(() => this.toast(`event ${payload.event_id} accepted`))
      .catch((err: unknown) => this.toast(`event rejected: ${errText(err)}`));
  }

  setConnection(status: StreamStatus): void {
    this.connState = status.state;
    this.el("conn").textContent = status.state;
    const banner = this.el("banner");
    if (status.state === "open") {
      banner.hidden = true;
      this.clearBannerTimer();
      return;
    }
    if (status.state === "retrying" && status.retryInMs !== undefined) {
      this.retryAtMs = Date.now() + status.retryInMs;
      banner.hidden = false;
      this.updateBanner(status.attempt ?? 0);
      if (this.bannerTimer === null) {
        this.bannerTimer = setInterval(() => this.updateBanner(status.attempt ?? 0), 250);
      }
      return;
    }
    banner.hidden = false;
    banner.textContent = `stream ${status.state}…`;
  }

  connectionError(message: string): void {
    const banner = this.el("banner");
    banner.hidden = false;
    banner.textContent = message;
  }

  private updateBanner(attempt: number): void {
    if (this.connState !== "retrying" || this.retryAtMs === null) {
      this.clearBannerTimer();
      return;
    }
    const left = Math.max(0, this.retryAtMs - Date.now());
    this.el("banner").textContent =
      `stream disconnected; retrying in ${(left / 1000).toFixed(1)} s (attempt ${attempt})`;
  }

  private clearBannerTimer(): void {
    if (this.bannerTimer !== null) {
      clearInterval(this.bannerTimer);
      this.bannerTimer = null;
    }
    this.retryAtMs = null;
  }

  toast(message: string): void {
    const host = this.el("toasts");
    const div = document.createElement("div");
    div.className = "toast";
    div.textContent = message;
    host.appendChild(div);
    setTimeout(() => div.remove(), 6000);
  }
}

function errText(err: unknown): string {
  if (err instanceof Error) return err.message;
  return String(err);
}
