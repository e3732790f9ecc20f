/** Canvas painting: grayscale panels, deformation-grid overlay, Dice bars.
 *  Pure pixel writes; no image codecs. */

import { B64Image, decodeImage } from "./api.js";

export function paintGrayscale(canvas: HTMLCanvasElement, img: B64Image): void {
  canvas.width = img.width;
  canvas.height = img.height;
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const bytes = decodeImage(img);
  const out = ctx.createImageData(img.width, img.height);
  for (let i = 0; i < bytes.length; i++) {
    const v = bytes[i];
    out.data[4 * i] = v;
    out.data[4 * i + 1] = v;
    out.data[4 * i + 2] = v;
    out.data[4 * i + 3] = 255;
  }
  ctx.putImageData(out, 0, 0);
}

export function clearCanvas(canvas: HTMLCanvasElement): void {
  const ctx = canvas.getContext("2d");
  if (ctx) ctx.clearRect(0, 0, canvas.width, canvas.height);
}

/** Draw deformed-grid polylines (arrays of [x, y] points) over a canvas. */
export function paintGrid(
  canvas: HTMLCanvasElement,
  lines: number[][][],
  scale: number,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.strokeStyle = "rgba(80, 200, 255, 0.8)";
  ctx.lineWidth = 1;
  for (const line of lines) {
    ctx.beginPath();
    line.forEach(([x, y], i) => {
      if (i === 0) ctx.moveTo(x * scale, y * scale);
      else ctx.lineTo(x * scale, y * scale);
    });
    ctx.stroke();
  }
}

/** Per-label Dice bar list; one row per label from /api/meta. */
export function renderDiceBars(
  container: HTMLElement,
  dice: Record<string, number>,
  labels: number[],
): void {
  container.innerHTML = "";
  for (const label of labels) {
    const value = dice[String(label)] ?? 0;
    const row = document.createElement("div");
    row.className = "dice-row";
    const name = document.createElement("span");
    name.textContent = `label ${label}`;
    const bar = document.createElement("div");
    bar.className = "dice-bar";
    const fill = document.createElement("div");
    fill.className = "dice-fill";
    fill.style.width = `${(100 * value).toFixed(1)}%`;
    const num = document.createElement("span");
    num.textContent = value.toFixed(3);
    bar.appendChild(fill);
    row.append(name, bar, num);
    container.appendChild(row);
  }
}

export function formatReadout(values: Record<string, number>): string {
  return Object.entries(values)
    .map(([k, v]) => `${k} = ${v.toFixed(3)}`)
    .join("   ");
}
