/** Aggregate-power chart. Series beyond MAX_POINTS are thinned with min/max
 * bucketing so spikes survive. The latest values are mirrored onto the
 * canvas dataset so the chart is observable without a 2d context. */

import type { PowerSample } from "./store";

export const MAX_POINTS = 5000;

export function downsample(samples: PowerSample[], maxPoints: number): PowerSample[] {
  if (samples.length <= maxPoints) return samples;
  const buckets = Math.max(1, Math.floor(maxPoints / 2));
  const size = Math.ceil(samples.length / buckets);
  const out: PowerSample[] = [];
  for (let start = 0; start < samples.length; start += size) {
    const end = Math.min(samples.length, start + size);
    let lo = start;
    let hi = start;
    for (let i = start + 1; i < end; i += 1) {
      if (samples[i].w < samples[lo].w) lo = i;
      if (samples[i].w > samples[hi].w) hi = i;
    }
    const first = Math.min(lo, hi);
    const second = Math.max(lo, hi);
    out.push(samples[first]);
    if (second !== first) out.push(samples[second]);
  }
  return out;
}

export function drawChart(
  canvas: HTMLCanvasElement,
  samples: PowerSample[],
  windowS: number,
): void {
  const pts = downsample(samples, MAX_POINTS);
  const last = pts[pts.length - 1];
  canvas.dataset.count = String(pts.length);
  canvas.dataset.latestT = last !== undefined ? String(last.t) : "";
  canvas.dataset.latestW = last !== undefined ? String(last.w) : "";

  const ctx = canvas.getContext("2d");
  if (ctx === null || last === undefined) return;

  const w = canvas.width;
  const h = canvas.height;
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#888";
  ctx.strokeRect(0.5, 0.5, w - 1, h - 1);

  const tMax = last.t;
  const tMin = tMax - windowS;
  let wMax = 0;
  for (const p of pts) {
    if (p.w > wMax) wMax = p.w;
  }
  if (wMax <= 0) wMax = 1;
  const x = (t: number) => ((t - tMin) / (tMax - tMin || 1)) * (w - 8) + 4;
  const y = (v: number) => h - 4 - (v / (wMax * 1.1)) * (h - 8);

  ctx.strokeStyle = "#2b7de9";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  let started = false;
  for (const p of pts) {
    if (p.t < tMin) continue;
    if (started) ctx.lineTo(x(p.t), y(p.w));
    else {
      ctx.moveTo(x(p.t), y(p.w));
      started = true;
    }
  }
  ctx.stroke();

  ctx.fillStyle = "#333";
  ctx.font = "11px sans-serif";
  ctx.fillText(`${Math.round(last.w)} W`, 6, 12);
}
