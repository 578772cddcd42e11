import { describe, expect, test } from "vitest";

import { ConsoleStore } from "../src/store";
import { envelope, snapshot } from "./helpers";

describe("snapshot application", () => {
  test("devices, points and writables come through verbatim", () => {
    const store = new ConsoleStore();
    store.applySnapshot(snapshot({ sim_time_s: 120, mode: "REALTIME" }));
    expect(store.simTimeS).toBe(120);
    expect(store.mode).toBe("REALTIME");
    expect([...store.devices.keys()]).toEqual(["ev1", "wh1", "site"]);
    const ev = store.devices.get("ev1")!;
    expect(ev.kind).toBe("ev_charger");
    expect(ev.points.get("soc_kwh")).toBe(0.0);
    expect(ev.writable).toEqual(["devices/b1/ev1/plugged", "devices/b1/ev1/enabled"]);
  });

  test("active events and shed set are loaded", () => {
    const store = new ConsoleStore();
    store.applySnapshot(
      snapshot({
        active_dr_events: [{ event_id: "e1", status: "active", price_per_kwh: 0.5 }],
        shed_set: ["wh1"],
      }),
    );
    expect(store.drActive.get("e1")?.price_per_kwh).toBe(0.5);
    expect(store.shedSet.has("wh1")).toBe(true);
  });

  test("seeds the aggregate series from snapshot powers", () => {
    const store = new ConsoleStore();
    store.applySnapshot(snapshot({ sim_time_s: 60 }));
    expect(store.series).toEqual([{ t: 60, w: 12500 }]);
  });
});

describe("envelope routing", () => {
  function loaded(): ConsoleStore {
    const store = new ConsoleStore();
    store.applySnapshot(snapshot());
    return store;
  }

  test("device point updates land on the right card state", () => {
    const store = loaded();
    store.applyEnvelope(envelope("devices/b1/wh1/t_tank", 51.5));
    expect(store.devices.get("wh1")!.points.get("t_tank")).toBe(51.5);
  });

  test("messages for devices missing from the snapshot are dropped", () => {
    const store = loaded();
    store.applyEnvelope(envelope("devices/b9/ghost/power", 999.0));
    expect(store.devices.has("ghost")).toBe(false);
    expect(store.aggregateW()).toBe(12500);
  });

  test("clock ticks move sim time and extend the series", () => {
    const store = loaded();
    store.applyEnvelope(envelope("clock/tick", { t: 300 }));
    expect(store.simTimeS).toBe(300);
    expect(store.series[store.series.length - 1]).toEqual({ t: 300, w: 12500 });
  });

  test("a power update at the same tick replaces the sample", () => {
    const store = loaded();
    store.applyEnvelope(envelope("clock/tick", { t: 60 }));
    store.applyEnvelope(envelope("devices/b1/ev1/power", 7200.0));
    const tail = store.series[store.series.length - 1];
    expect(tail).toEqual({ t: 60, w: 19700 });
    expect(store.series.filter((s) => s.t === 60)).toHaveLength(1);
  });

  test("price updates are kept", () => {
    const store = loaded();
    store.applyEnvelope(envelope("dr/price", 0.62));
    expect(store.price).toBe(0.62);
  });

  test("dr events toggle on status", () => {
    const store = loaded();
    store.applyEnvelope(
      envelope("dr/events", {
        event_id: "e7",
        status: "active",
        price_per_kwh: 0.9,
        reliability: "EMERGENCY",
        target_limit_w: 16000,
      }),
    );
    expect(store.drActive.get("e7")?.target_limit_w).toBe(16000);
    store.applyEnvelope(envelope("dr/events", { event_id: "e7", status: "ended" }));
    expect(store.drActive.has("e7")).toBe(false);
  });

  test("shed entries update the set and the log", () => {
    const store = loaded();
    store.applyEnvelope(
      envelope("control/shed", { t: 120, measured_w: 19700, limit_w: 16000, shed: ["wh1"] }),
    );
    expect(store.shedSet.has("wh1")).toBe(true);
    expect(store.shedLog).toHaveLength(1);
    store.applyEnvelope(
      envelope("control/shed", { t: 180, measured_w: 15200, limit_w: 16000, shed: [] }),
    );
    expect(store.shedSet.size).toBe(0);
    expect(store.shedLog).toHaveLength(2);
  });

  test("the shed log is capped", () => {
    const store = loaded();
    for (let i = 0; i < 250; i += 1) {
      store.applyEnvelope(
        envelope("control/shed", { t: i, measured_w: 1, limit_w: 1, shed: [] }),
      );
    }
    expect(store.shedLog.length).toBe(200);
    expect(store.shedLog[0].t).toBe(50);
  });
});

describe("aggregate series window", () => {
  test("samples older than the window are pruned", () => {
    const store = new ConsoleStore(3600);
    store.applySnapshot(snapshot({ sim_time_s: 0 }));
    for (let t = 60; t <= 7200; t += 60) {
      store.applyEnvelope(envelope("clock/tick", { t }));
    }
    expect(store.series[0].t).toBeGreaterThanOrEqual(7200 - 3600);
    expect(store.series[store.series.length - 1].t).toBe(7200);
  });

  test("non-numeric power payloads do not poison the sum", () => {
    const store = new ConsoleStore();
    store.applySnapshot(snapshot());
    store.applyEnvelope(envelope("devices/b1/site/power", "broken"));
    expect(store.aggregateW()).toBe(4500); // ev 0 + wh 4500; site now non-numeric
  });
});
