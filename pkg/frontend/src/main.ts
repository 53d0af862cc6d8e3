/** Browser entry: one WebSocket, one SessionView, DOM painted from it. */

import {
  ControlBindings, KEY_BINDINGS, buildBindings, currentAction, keyDown,
  keyUp, sendWithRetry, setSlider,
} from "./controls.js";
import { colorAt, depthToRGBA } from "./heatmap.js";
import { buildActionMessage } from "./protocol.js";
import {
  SessionView, applyMessage, auditWorldGeometry, formatDistance,
  initialView, onDisconnect, onSendFailure,
} from "./session.js";

const $ = (id: string) => document.getElementById(id)!;

let view: SessionView = initialView();
let bindings: ControlBindings | null = null;
let emitTimer: number | null = null;
let tick = 0;

const ws = new WebSocket(`ws://${location.host}/ws`);

ws.onmessage = (ev) => {
  const hadHello = view.hello !== null;
  view = applyMessage(view, String(ev.data));
  if (!hadHello && view.hello) {
    bindings = buildBindings(view.hello.joint_modes);
    buildControlPanel(bindings);
    startEmitLoop(view.hello.rate_hz);
  }
  render();
};
ws.onclose = () => {
  view = onDisconnect(view);
  if (emitTimer !== null) clearInterval(emitTimer);
  render();
};
ws.onerror = () => {
  view = onSendFailure(view, "websocket error");
  render();
};

function startEmitLoop(rateHz: number): void {
  const period = 1000 / Math.max(10, rateHz);
  emitTimer = window.setInterval(() => {
    if (!view.controlsEnabled || !bindings) return;
    const msg = buildActionMessage(tick++, currentAction(bindings));
    const res = sendWithRetry((text) => ws.send(text), JSON.stringify(msg));
    if (!res.ok) {
      view = onSendFailure(view, res.error ?? "unknown");
      render();
    }
  }, period);
}

// -- controls panel ----------------------------------------------------------

function buildControlPanel(b: ControlBindings): void {
  for (const [groupId, lo, hi] of [["joint-sliders", 0, 6],
                                   ["wheel-sliders", 6, 12]] as const) {
    const host = $(groupId);
    host.innerHTML = "";
    for (let i = lo; i < hi; i++) {
      const ch = b.channels[i]!;
      const row = document.createElement("label");
      row.className = "slider-row";
      row.innerHTML = `<span>${ch.name} <em>${ch.mode}</em></span>`;
      const input = document.createElement("input");
      input.type = "range";
      input.min = "-1";
      input.max = "1";
      input.step = "0.05";
      input.value = "0";
      input.dataset.index = String(i);
      input.oninput = () => {
        setSlider(b, i, Number(input.value));
      };
      const val = document.createElement("b");
      val.dataset.valueFor = String(i);
      val.textContent = "0.00";
      row.append(input, val);
      host.append(row);
    }
  }
  const help = Object.entries(KEY_BINDINGS)
    .map(([k, bind]) => `<kbd>${k}</kbd> ${bind.label}`)
    .join(" · ");
  $("key-help").innerHTML = help;
}

window.addEventListener("keydown", (ev) => {
  if (!bindings || !view.controlsEnabled || ev.repeat) return;
  if (keyDown(bindings, ev.key)) ev.preventDefault();
});
window.addEventListener("keyup", (ev) => {
  if (!bindings || !view.controlsEnabled) return;
  if (keyUp(bindings, ev.key)) ev.preventDefault();
});

// -- painting ----------------------------------------------------------------

const depthCanvas = $("depth") as HTMLCanvasElement;
const mapCanvas = $("map") as HTMLCanvasElement;
const scratch = document.createElement("canvas");
scratch.width = 16;
scratch.height = 16;

function paintDepth(): void {
  if (!view.depth || !view.hello) return;
  const rgba = depthToRGBA(view.depth, view.hello.h_max);
  const sctx = scratch.getContext("2d")!;
  sctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), 16, 16), 0, 0);
  const ctx = depthCanvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(scratch, 0, 0, depthCanvas.width, depthCanvas.height);
}

function paintLegend(): void {
  if (!view.hello) return;
  const canvas = $("legend-ramp") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  for (let x = 0; x < canvas.width; x++) {
    const [r, g, b] = colorAt(x / (canvas.width - 1));
    ctx.fillStyle = `rgb(${r},${g},${b})`;
    ctx.fillRect(x, 0, 1, canvas.height);
  }
  $("legend-max").textContent = `${view.hello.h_max.toFixed(1)} m`;
}

function paintMap(): void {
  const hello = view.hello;
  const world = view.frame?.world as
    | { nodes: number[][]; wall_lines: number[][]; wall_arcs: number[][] }
    | undefined;
  const wrap = $("map-wrap");
  if (!hello || hello.fairness || !world) {
    wrap.style.display = "none";
    return;
  }
  wrap.style.display = "block";
  const ctx = mapCanvas.getContext("2d")!;
  const { width, height } = mapCanvas;
  ctx.clearRect(0, 0, width, height);

  const xs: number[] = [];
  const ys: number[] = [];
  for (const [px, py, qx, qy] of world.wall_lines as [number, number, number, number][]) {
    xs.push(px, qx);
    ys.push(py, qy);
  }
  if (!xs.length) return;
  const minX = Math.min(...xs), maxX = Math.max(...xs);
  const minY = Math.min(...ys), maxY = Math.max(...ys);
  const scale = 0.9 * Math.min(width / (maxX - minX + 1e-9),
                               height / (maxY - minY + 1e-9));
  const tx = (x: number) => (x - (minX + maxX) / 2) * scale + width / 2;
  const ty = (y: number) => height / 2 - (y - (minY + maxY) / 2) * scale;

  ctx.strokeStyle = "#8b949e";
  ctx.beginPath();
  for (const [px, py, qx, qy] of world.wall_lines as [number, number, number, number][]) {
    ctx.moveTo(tx(px), ty(py));
    ctx.lineTo(tx(qx), ty(qy));
  }
  for (const [cx, cy, r, a0, sweep] of world.wall_arcs as [number, number, number, number, number][]) {
    for (let k = 0; k <= 24; k++) {
      const a = a0 + (sweep * k) / 24;
      const x = tx(cx + r * Math.cos(a));
      const y = ty(cy + r * Math.sin(a));
      if (k === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    }
  }
  ctx.stroke();

  ctx.fillStyle = "#58a6ff";
  for (const [nx, ny] of world.nodes as [number, number][]) {
    ctx.beginPath();
    ctx.arc(tx(nx), ty(ny), 3, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function fillCells(hostId: string, values: number[], digits = 2): void {
  const host = $(hostId);
  host.innerHTML = values.map((v) => `<td>${v.toFixed(digits)}</td>`).join("");
}

function paintReadouts(): void {
  const k = view.frame?.kinematic;
  if (!k) return;
  fillCells("row-angle", k.slice(0, 6));
  fillCells("row-orient", k.slice(6, 12));
  fillCells("row-jvel", k.slice(12, 18));
  fillCells("row-wspeed", k.slice(30, 36));
  fillCells("row-held", k.slice(36, 48));
}

function render(): void {
  const badge = $("status");
  badge.textContent = view.status;
  badge.className = `badge ${view.status}`;

  const banner = $("banner");
  banner.style.display = view.banner ? "block" : "none";
  banner.textContent = view.banner ?? "";

  $("distance").textContent = formatDistance(view.distanceShown);
  $("fairness").textContent = view.hello
    ? (view.hello.fairness ? "fairness: on" : "fairness: off") : "";

  document.querySelectorAll<HTMLInputElement>("input[type=range]").forEach(
    (el) => { el.disabled = !view.controlsEnabled; });
  if (bindings) {
    for (const [i, ch] of bindings.channels.entries()) {
      const label = document.querySelector(`[data-value-for="${i}"]`);
      if (label) label.textContent = ch.value.toFixed(2);
      const slider = document.querySelector<HTMLInputElement>(
        `input[data-index="${i}"]`);
      if (slider && document.activeElement !== slider) {
        slider.value = String(ch.value);
      }
    }
  }

  const result = $("result");
  if (view.result) {
    result.style.display = "block";
    result.textContent = `episode over: ${formatDistance(view.result.distance)}`
      + ` in ${view.result.steps} steps, corners ${view.result.corners},`
      + ` goal ${view.result.goal}`;
  }

  if (view.hello?.fairness) {
    const leaks = auditWorldGeometry(view);
    if (leaks.length) {
      view = { ...view, banner: `fairness breach: ${leaks.join(", ")}` };
      banner.style.display = "block";
      banner.textContent = view.banner;
    }
  }

  paintDepth();
  paintLegend();
  paintMap();
  paintReadouts();
}

render();
