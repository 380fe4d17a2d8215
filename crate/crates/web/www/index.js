import init, { membership_projection, diameter_curve, xi_profile } from "./pkg/sme_web.js";

const $ = (id) => document.getElementById(id);

function status(id, text, isError = false) {
  const el = $(id);
  el.textContent = text;
  el.className = isError ? "err" : "";
}

function timed(statusId, fn) {
  status(statusId, "working...");
  // let the status repaint before the synchronous wasm call
  setTimeout(() => {
    const t0 = performance.now();
    try {
      fn();
      status(statusId, `${(performance.now() - t0).toFixed(0)} ms`);
    } catch (e) {
      status(statusId, String(e.message ?? e), true);
    }
  }, 10);
}

// Maps data coordinates to canvas pixels with a margin for tick labels.
function frame(canvas, xr, yr, { logX = false, logY = false } = {}) {
  const m = { l: 60, r: 15, t: 15, b: 35 };
  const w = canvas.width - m.l - m.r;
  const h = canvas.height - m.t - m.b;
  const f = (v, log) => (log ? Math.log10(v) : v);
  const [x0, x1] = xr.map((v) => f(v, logX));
  const [y0, y1] = yr.map((v) => f(v, logY));
  return {
    x: (v) => m.l + ((f(v, logX) - x0) / (x1 - x0)) * w,
    y: (v) => m.t + h - ((f(v, logY) - y0) / (y1 - y0)) * h,
    m, w, h,
  };
}

function axes(ctx, fr, xTicks, yTicks, fmt = (v) => v.toPrecision(3)) {
  ctx.strokeStyle = "#999";
  ctx.fillStyle = "#444";
  ctx.font = "11px system-ui";
  ctx.strokeRect(fr.m.l, fr.m.t, fr.w, fr.h);
  ctx.textAlign = "center";
  for (const v of xTicks) ctx.fillText(fmt(v), fr.x(v), fr.m.t + fr.h + 15);
  ctx.textAlign = "right";
  for (const v of yTicks) ctx.fillText(fmt(v), fr.m.l - 5, fr.y(v) + 4);
}

function polyline(ctx, pts, color, dash = []) {
  ctx.strokeStyle = color;
  ctx.setLineDash(dash);
  ctx.lineWidth = 2;
  ctx.beginPath();
  pts.forEach(([x, y], i) => (i ? ctx.lineTo(x, y) : ctx.moveTo(x, y)));
  ctx.stroke();
  ctx.setLineDash([]);
}

function decades(lo, hi) {
  const out = [];
  for (let e = Math.floor(Math.log10(lo)); e <= Math.ceil(Math.log10(hi)); e++) out.push(10 ** e);
  return out;
}

function drawProjection() {
  const [i, j] = $("p-axes").value.split(",").map(Number);
  const pts = membership_projection(
    $("p-support").value, Number($("p-horizon").value), BigInt($("p-seed").value), i, j, 96,
  );
  const canvas = $("p-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const truth = [pts[0], pts[1]];
  const outline = [];
  for (let k = 2; k < pts.length; k += 2) outline.push([pts[k], pts[k + 1]]);
  const xs = outline.map((p) => p[0]);
  const ys = outline.map((p) => p[1]);
  const half = 1.15 * Math.max(...xs.map((x) => Math.abs(x - truth[0])), ...ys.map((y) => Math.abs(y - truth[1])), 1e-6);
  const xr = [truth[0] - half, truth[0] + half];
  const yr = [truth[1] - half, truth[1] + half];
  const fr = frame(canvas, xr, yr);
  axes(ctx, fr, [xr[0], truth[0], xr[1]], [yr[0], truth[1], yr[1]]);
  ctx.fillStyle = "rgba(21,101,192,0.15)";
  ctx.beginPath();
  outline.forEach(([x, y], k) => (k ? ctx.lineTo(fr.x(x), fr.y(y)) : ctx.moveTo(fr.x(x), fr.y(y))));
  ctx.closePath();
  ctx.fill();
  polyline(ctx, [...outline, outline[0]].map(([x, y]) => [fr.x(x), fr.y(y)]), "#1565c0");
  ctx.fillStyle = "#c62828";
  ctx.beginPath();
  ctx.arc(fr.x(truth[0]), fr.y(truth[1]), 4, 0, 2 * Math.PI);
  ctx.fill();
}

function drawCurves() {
  const rows = diameter_curve($("c-support").value, Number($("c-horizon").value), BigInt($("c-seed").value));
  const t = [], lo = [], up = [], lse = [];
  for (let k = 0; k < rows.length; k += 4) {
    t.push(rows[k]); lo.push(rows[k + 1]); up.push(rows[k + 2]); lse.push(rows[k + 3]);
  }
  const canvas = $("c-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const all = [...lo, ...up, ...lse].filter((v) => v > 0);
  const yr = [Math.min(...all) / 1.5, Math.max(...all) * 1.5];
  const xr = [t[0], t[t.length - 1]];
  const fr = frame(canvas, xr, yr, { logX: true, logY: true });
  axes(ctx, fr, t.filter((_, k) => k % 2 === 0 || k === t.length - 1), decades(...yr).filter((v) => v >= yr[0] && v <= yr[1]),
    (v) => (v >= 1 ? String(Math.round(v)) : v.toExponential(0)));
  const series = (ys) => t.map((x, k) => [fr.x(x), fr.y(Math.max(ys[k], yr[0]))]);
  polyline(ctx, series(up), "#1565c0");
  polyline(ctx, series(lo), "#64b5f6", [5, 4]);
  polyline(ctx, series(lse), "#ef6c00");
}

function drawXi() {
  const kmax = Number($("x-kmax").value);
  const xi = xi_profile(kmax);
  const ks = xi.map((_, n) => n + 3);
  const canvas = $("x-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const fr = frame(canvas, [3, Math.max(4, kmax)], [0.4, 1.0]);
  const step = Math.max(1, Math.round(kmax / 10));
  axes(ctx, fr, ks.filter((k) => (k - 3) % step === 0), [0.4, 0.6, 0.8, 1.0], (v) => String(v));
  polyline(ctx, ks.map((k, n) => [fr.x(k), fr.y(xi[n])]), "#2e7d32");
  ctx.fillStyle = "#2e7d32";
  ks.forEach((k, n) => {
    ctx.beginPath();
    ctx.arc(fr.x(k), fr.y(xi[n]), 2.5, 0, 2 * Math.PI);
    ctx.fill();
  });
}

await init();
$("p-run").onclick = () => timed("p-status", drawProjection);
$("c-run").onclick = () => timed("c-status", drawCurves);
$("x-run").onclick = () => timed("x-status", drawXi);
timed("p-status", drawProjection);
timed("x-status", drawXi);
