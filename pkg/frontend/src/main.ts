/** Page wiring: upload panel, pose studio sliders, paint editor, and the
 * filmstrip, all rendered from SessionState. */

import { ApiClient, base64ToBytes } from "./api.js";
import {
  type OverlayBuffer,
  compositeOnto,
  createOverlay,
  isTransparent,
  paintStroke,
} from "./paint.js";
import { Session } from "./session.js";
import { POSE_AXES, SLIDER_RANGES, type SessionState, formatSliderValue } from "./state.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function pngUrl(b64: string): string {
  return `data:image/png;base64,${b64}`;
}

async function fileToBase64(file: File): Promise<string> {
  const buf = new Uint8Array(await file.arrayBuffer());
  let bin = "";
  for (const b of buf) bin += String.fromCharCode(b);
  return btoa(bin);
}

/** Decode a base64 PNG to RGBA via an offscreen canvas. */
async function decodePng(b64: string): Promise<{ width: number; height: number; data: Uint8ClampedArray }> {
  const bytes = base64ToBytes(b64);
  const blob = new Blob([bytes.buffer as ArrayBuffer], { type: "image/png" });
  const bitmap = await createImageBitmap(blob);
  const canvas = document.createElement("canvas");
  canvas.width = bitmap.width;
  canvas.height = bitmap.height;
  const ctx = canvas.getContext("2d")!;
  ctx.drawImage(bitmap, 0, 0);
  const img = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
  return { width: img.width, height: img.height, data: img.data };
}

function toImageData(data: Uint8ClampedArray, width: number, height: number): ImageData {
  const img = new ImageData(width, height);
  img.data.set(data);
  return img;
}

function encodeOverlayWithCanvas(overlay: OverlayBuffer): string {
  const canvas = document.createElement("canvas");
  canvas.width = overlay.width;
  canvas.height = overlay.height;
  const ctx = canvas.getContext("2d")!;
  ctx.putImageData(toImageData(overlay.data, overlay.width, overlay.height), 0, 0);
  return canvas.toDataURL("image/png").split(",", 2)[1]!;
}

function main(): void {
  const api = new ApiClient("");
  const banner = el<HTMLDivElement>("banner");
  const embeddedCanvas = el<HTMLCanvasElement>("embedded-canvas");
  const preview = el<HTMLImageElement>("preview");
  const filmstrip = el<HTMLDivElement>("filmstrip");
  const inflight = el<HTMLSpanElement>("inflight");

  let overlay: OverlayBuffer | null = null;
  let embeddedRgba: Uint8ClampedArray | null = null;

  function redrawCanvas(): void {
    if (!overlay || !embeddedRgba) return;
    const ctx = embeddedCanvas.getContext("2d")!;
    const shown = compositeOnto(embeddedRgba, overlay);
    ctx.putImageData(toImageData(shown, overlay.width, overlay.height), 0, 0);
  }

  async function render(state: SessionState): Promise<void> {
    banner.textContent = state.banner ?? "";
    banner.hidden = state.banner === null;
    inflight.hidden = !state.requestInFlight;
    for (const axis of POSE_AXES) {
      const slider = el<HTMLInputElement>(`slider-${axis}`);
      const value = state.sliders[POSE_AXES.indexOf(axis)]!;
      if (document.activeElement !== slider) slider.value = String(value);
      el<HTMLOutputElement>(`value-${axis}`).textContent = formatSliderValue(axis, value);
    }
    preview.src = state.previewPng ? pngUrl(state.previewPng) : "";
    filmstrip.replaceChildren(
      ...state.filmstrip.map((b64) => {
        const img = document.createElement("img");
        img.src = pngUrl(b64);
        img.className = "strip-frame";
        return img;
      }),
    );
    if (state.embeddedPng) {
      const decoded = await decodePng(state.embeddedPng);
      embeddedRgba = decoded.data;
      if (!overlay || overlay.width !== decoded.width || overlay.height !== decoded.height) {
        overlay = createOverlay(decoded.width, decoded.height);
      }
      embeddedCanvas.width = decoded.width;
      embeddedCanvas.height = decoded.height;
      redrawCanvas();
    }
  }

  const session = new Session(api, (state) => {
    void render(state);
  });

  for (const axis of POSE_AXES) {
    const slider = el<HTMLInputElement>(`slider-${axis}`);
    const range = SLIDER_RANGES[axis];
    slider.min = String(range.min);
    slider.max = String(range.max);
    slider.step = String(range.step);
    slider.addEventListener("input", () => session.setSlider(axis, Number(slider.value)));
  }
  el<HTMLButtonElement>("reset-pose").addEventListener("click", () => session.resetSliders());

  el<HTMLInputElement>("source-files").addEventListener("change", async (ev) => {
    const input = ev.target as HTMLInputElement;
    if (!input.files || input.files.length === 0) return;
    const sources = await Promise.all([...input.files].map(fileToBase64));
    overlay = null;
    await session.createEmbedding(sources);
  });

  function canvasPoint(ev: MouseEvent): [number, number] {
    const rect = embeddedCanvas.getBoundingClientRect();
    return [
      ((ev.clientX - rect.left) / rect.width) * embeddedCanvas.width,
      ((ev.clientY - rect.top) / rect.height) * embeddedCanvas.height,
    ];
  }

  let painting = false;
  let last: [number, number] | null = null;
  embeddedCanvas.addEventListener("mousedown", (ev) => {
    painting = true;
    last = canvasPoint(ev);
  });
  window.addEventListener("mouseup", () => {
    painting = false;
    last = null;
  });
  embeddedCanvas.addEventListener("mousemove", (ev) => {
    if (!painting || !overlay || !last) return;
    const point = canvasPoint(ev);
    const brush = { ...session.state.brush };
    const color = el<HTMLInputElement>("brush-color").value;
    brush.color = [
      parseInt(color.slice(1, 3), 16),
      parseInt(color.slice(3, 5), 16),
      parseInt(color.slice(5, 7), 16),
    ];
    brush.radius = Number(el<HTMLInputElement>("brush-radius").value);
    brush.opacity = Number(el<HTMLInputElement>("brush-opacity").value);
    session.state.brush = brush;
    paintStroke(overlay, last[0], last[1], point[0], point[1], brush);
    last = point;
    redrawCanvas();
  });

  el<HTMLButtonElement>("clear-strokes").addEventListener("click", () => {
    if (!overlay) return;
    overlay.data.fill(0);
    redrawCanvas();
  });
  el<HTMLButtonElement>("apply-overlay").addEventListener("click", async () => {
    if (!overlay) return;
    await session.applyOverlay(encodeOverlayWithCanvas(overlay));
    if (!session.state.banner && overlay && !isTransparent(overlay)) overlay.data.fill(0);
  });
  el<HTMLButtonElement>("revert-overlay").addEventListener("click", () => session.revert());

  el<HTMLButtonElement>("preview-sequence").addEventListener("click", async () => {
    const input = el<HTMLInputElement>("driving-files");
    if (!input.files || input.files.length === 0) return;
    const frames = await Promise.all([...input.files].map(fileToBase64));
    await session.previewSequence(frames);
  });
}

main();
