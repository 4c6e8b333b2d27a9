/** Local RGBA overlay buffer that canvas strokes accumulate into.
 *
 * Painting writes color and alpha directly (last stroke wins), matching
 * the straight-alpha compositing the service applies on the embedded
 * face. PNG encoding is injected: the page uses a canvas, tests use a
 * node encoder.
 */

import type { BrushSettings } from "./state.js";

export interface OverlayBuffer {
  width: number;
  height: number;
  /** RGBA, row-major, 4 bytes per pixel. */
  data: Uint8ClampedArray;
}

export type OverlayEncoder = (overlay: OverlayBuffer) => string;

export function createOverlay(width: number, height: number): OverlayBuffer {
  if (width < 1 || height < 1) throw new Error(`overlay size must be positive, got ${width}x${height}`);
  return { width, height, data: new Uint8ClampedArray(width * height * 4) };
}

/** Solid disc: every pixel with (x-cx)^2 + (y-cy)^2 <= radius^2. */
export function paintDot(overlay: OverlayBuffer, cx: number, cy: number, brush: BrushSettings): void {
  const r2 = brush.radius * brush.radius;
  const alpha = Math.round(brush.opacity * 255);
  const x0 = Math.max(0, Math.floor(cx - brush.radius));
  const x1 = Math.min(overlay.width - 1, Math.ceil(cx + brush.radius));
  const y0 = Math.max(0, Math.floor(cy - brush.radius));
  const y1 = Math.min(overlay.height - 1, Math.ceil(cy + brush.radius));
  for (let y = y0; y <= y1; y++) {
    for (let x = x0; x <= x1; x++) {
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) > r2) continue;
      const i = (y * overlay.width + x) * 4;
      overlay.data[i] = brush.color[0];
      overlay.data[i + 1] = brush.color[1];
      overlay.data[i + 2] = brush.color[2];
      overlay.data[i + 3] = alpha;
    }
  }
}

/** A stroke is a chain of dots spaced at most one pixel apart. */
export function paintStroke(
  overlay: OverlayBuffer,
  x0: number,
  y0: number,
  x1: number,
  y1: number,
  brush: BrushSettings,
): void {
  const steps = Math.max(1, Math.ceil(Math.hypot(x1 - x0, y1 - y0)));
  for (let k = 0; k <= steps; k++) {
    const t = k / steps;
    paintDot(overlay, x0 + t * (x1 - x0), y0 + t * (y1 - y0), brush);
  }
}

export function isTransparent(overlay: OverlayBuffer): boolean {
  for (let i = 3; i < overlay.data.length; i += 4) {
    if (overlay.data[i] !== 0) return false;
  }
  return true;
}

/** Straight-alpha composite for the local canvas preview; `base` is RGBA
 * of the embedded image and is left untouched. */
export function compositeOnto(base: Uint8ClampedArray, overlay: OverlayBuffer): Uint8ClampedArray {
  if (base.length !== overlay.data.length) {
    throw new Error(`embedded image has ${base.length / 4} pixels, overlay ${overlay.data.length / 4}`);
  }
  const out = new Uint8ClampedArray(base);
  for (let p = 0; p < overlay.data.length; p += 4) {
    const a = (overlay.data[p + 3] ?? 0) / 255;
    if (a === 0) continue;
    for (let c = 0; c < 3; c++) {
      out[p + c] = Math.round(a * (overlay.data[p + c] ?? 0) + (1 - a) * (base[p + c] ?? 0));
    }
  }
  return out;
}
