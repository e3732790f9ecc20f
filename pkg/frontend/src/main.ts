/** DOM wiring: sliders, pair selector, panels, auto-tune button. */

import { B64Image, HttpTransport } from "./api.js";
import { Controller, UiState } from "./controller.js";
import {
  clearCanvas,
  formatReadout,
  paintGrayscale,
  paintGrid,
  renderDiceBars,
} from "./render.js";

const SCALE = 4; // display magnification for 64x64 grids

function canvas(id: string): HTMLCanvasElement {
  return document.getElementById(id) as HTMLCanvasElement;
}

function el<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T;
}

const transport = new HttpTransport();
let moving: B64Image | null = null;
let fixed: B64Image | null = null;

function render(state: UiState): void {
  el<HTMLElement>("readout").textContent = formatReadout(state.sliders);
  el<HTMLElement>("status").textContent = state.error
    ? `error: ${state.error}`
    : state.pending
      ? "computing..."
      : state.payload
        ? `${state.payload.ms.toFixed(0)} ms, mean |u| ${state.payload.mean_disp.toFixed(2)}, ` +
          `neg-det ${(100 * state.payload.negdet_frac).toFixed(2)}%`
        : "";
  const tuneBtn = el<HTMLButtonElement>("autotune");
  const busy = state.tuneStatus === "queued" || state.tuneStatus === "running";
  tuneBtn.disabled = busy;
  tuneBtn.title = busy ? "a tune job is already running" : "gradient ascent on validation Dice";
  el<HTMLElement>("tune-info").textContent =
    state.tuneStatus === "done" && state.tuneResult
      ? `tuned: objective ${state.tuneResult.objective.toFixed(4)} in ` +
        `${state.tuneResult.seconds.toFixed(1)} s`
      : busy
        ? `tuning (${state.tuneStatus})...`
        : "";
  if (!state.payload) {
    ["warped", "difference"].forEach((id) => clearCanvas(canvas(id)));
    return;
  }
  if (moving) paintGrayscale(canvas("moving"), moving);
  if (fixed) paintGrayscale(canvas("fixed"), fixed);
  paintGrayscale(
    canvas("warped"),
    state.labelOverlay ? state.payload.warped_labels : state.payload.warped,
  );
  paintGrayscale(canvas("difference"), state.payload.difference);
  const overlay = canvas("overlay");
  overlay.width = state.payload.warped.width * SCALE;
  overlay.height = state.payload.warped.height * SCALE;
  clearCanvas(overlay);
  if (state.gridOverlay) paintGrid(overlay, state.payload.grid, SCALE);
  const ctrl = controller;
  if (ctrl.meta) renderDiceBars(el("dice"), state.payload.dice, ctrl.meta.labels);
}

const controller = new Controller(transport, render);

async function loadPair(id: number): Promise<void> {
  const p = await transport.pair(id);
  moving = p["moving"] as B64Image;
  fixed = p["fixed"] as B64Image;
}

async function start(): Promise<void> {
  await controller.init();
  const meta = controller.meta;
  if (!meta) return;
  const pairSel = el<HTMLSelectElement>("pair");
  for (const id of meta.pair_ids) {
    const opt = document.createElement("option");
    opt.value = String(id);
    opt.textContent = `pair ${id}`;
    pairSel.appendChild(opt);
  }
  pairSel.addEventListener("change", () => {
    void loadPair(Number(pairSel.value)).then(() =>
      controller.selectPair(Number(pairSel.value)),
    );
  });
  const sliders = el<HTMLElement>("sliders");
  for (const hp of meta.hyperparameters) {
    const row = document.createElement("div");
    row.className = "slider-row";
    const label = document.createElement("label");
    label.textContent = hp.name;
    const input = document.createElement("input");
    input.type = "range";
    input.min = String(hp.min ?? Math.min(...(hp.values ?? [0])));
    input.max = String(hp.max ?? Math.max(...(hp.values ?? [1])));
    input.step = hp.kind === "continuous" ? "0.01" : "2";
    input.value = String(hp.default);
    input.id = `slider-${hp.name}`;
    input.addEventListener("input", () =>
      controller.onSliderChange(hp.name, Number(input.value)),
    );
    row.append(label, input);
    sliders.appendChild(row);
  }
  el<HTMLButtonElement>("autotune").addEventListener("click", () => {
    const scope = el<HTMLSelectElement>("scope").value || null;
    void controller.onAutotuneClick(scope).then(() => {
      // move slider elements to the tuned values
      for (const [name, value] of Object.entries(controller.state.sliders)) {
        const input = document.getElementById(
          `slider-${name}`,
        ) as HTMLInputElement | null;
        if (input) input.value = String(value);
      }
    });
  });
  el<HTMLInputElement>("toggle-grid").addEventListener("change", (e) => {
    controller.state.gridOverlay = (e.target as HTMLInputElement).checked;
    render(controller.state);
  });
  el<HTMLInputElement>("toggle-labels").addEventListener("change", (e) => {
    controller.state.labelOverlay = (e.target as HTMLInputElement).checked;
    render(controller.state);
  });
  await loadPair(0);
  render(controller.state);
}

window.addEventListener("DOMContentLoaded", () => {
  void start();
});
