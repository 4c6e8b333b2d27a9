/** Replay harness for recorded request/response pairs.
 *
 * The fixtures under ../fixtures are real exchanges captured from the
 * inference service (see fixtures/record.py). FixtureServer implements
 * the fetch contract over them: a request matches a pair when method,
 * path, and parsed JSON body agree. PNG fields are compared by decoded
 * RGBA rather than by bytes, because the browser and the service do not
 * share a PNG encoder.
 */

import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { PNG } from "pngjs";

const FIXTURE_DIR = join(dirname(fileURLToPath(import.meta.url)), "..", "fixtures");

export interface RecordedPair {
  name: string;
  request: { method: string; path: string; json: Record<string, unknown> };
  response: {
    status: number;
    content_type: string;
    json?: Record<string, unknown>;
    body_base64?: string;
  };
}

export function loadPairs(...files: string[]): RecordedPair[] {
  const pairs: RecordedPair[] = [];
  for (const file of files) {
    const text = readFileSync(join(FIXTURE_DIR, file), "utf8");
    pairs.push(...(JSON.parse(text) as RecordedPair[]));
  }
  return pairs;
}

export function loadAssets(): {
  source_png_base64: string;
  resolution: number;
  tx_offsets: number[];
  dot: { cx: number; cy: number; radius: number; color: number[]; opacity: number };
  mismatch_overlay_size: number;
} {
  return JSON.parse(readFileSync(join(FIXTURE_DIR, "assets.json"), "utf8"));
}

export function decodeRgba(base64: string): { width: number; height: number; data: Uint8Array } {
  const png = PNG.sync.read(Buffer.from(base64, "base64"));
  return { width: png.width, height: png.height, data: new Uint8Array(png.data) };
}

function rgbaEqual(a: string, b: string): boolean {
  const da = decodeRgba(a);
  const db = decodeRgba(b);
  if (da.width !== db.width || da.height !== db.height) return false;
  return Buffer.from(da.data).equals(Buffer.from(db.data));
}

const PNG_FIELDS = new Set(["overlay_base64", "driving_base64"]);
const PNG_LIST_FIELDS = new Set(["sources_base64"]);

function deepEqual(a: unknown, b: unknown): boolean {
  if (Object.is(a, b)) return true;
  if (Array.isArray(a) && Array.isArray(b)) {
    return a.length === b.length && a.every((v, i) => deepEqual(v, b[i]));
  }
  if (a && b && typeof a === "object" && typeof b === "object") {
    const ka = Object.keys(a).sort();
    const kb = Object.keys(b).sort();
    if (!deepEqual(ka, kb)) return false;
    return ka.every((k) =>
      deepEqual((a as Record<string, unknown>)[k], (b as Record<string, unknown>)[k]),
    );
  }
  return false;
}

/** Structural match with image fields compared by decoded pixels. */
function bodyMatches(recorded: Record<string, unknown>, actual: Record<string, unknown>): boolean {
  const keys = Object.keys(recorded).sort();
  if (!deepEqual(keys, Object.keys(actual).sort())) return false;
  for (const key of keys) {
    const rv = recorded[key];
    const av = actual[key];
    if (PNG_FIELDS.has(key) && typeof rv === "string" && typeof av === "string") {
      if (!rgbaEqual(rv, av)) return false;
    } else if (PNG_LIST_FIELDS.has(key) && Array.isArray(rv) && Array.isArray(av)) {
      if (rv.length !== av.length) return false;
      for (let i = 0; i < rv.length; i++) {
        if (!rgbaEqual(rv[i] as string, av[i] as string)) return false;
      }
    } else if (!deepEqual(rv, av)) {
      return false;
    }
  }
  return true;
}

export class UnmatchedRequestError extends Error {}

/** fetch-compatible stub that answers only from the loaded recordings. */
export class FixtureServer {
  readonly calls: { name: string; path: string; body: Record<string, unknown> }[] = [];
  latencyMs = 0;

  constructor(private pairs: RecordedPair[]) {}

  fetch: typeof globalThis.fetch = async (input, init): Promise<Response> => {
    const path = new URL(String(input), "http://fixtures.local").pathname;
    const method = (init?.method ?? "GET").toUpperCase();
    const body = JSON.parse(String(init?.body ?? "null")) as Record<string, unknown>;

    if (this.latencyMs > 0) {
      await new Promise((resolve) => setTimeout(resolve, this.latencyMs));
    }
    if (init?.signal?.aborted) {
      throw new DOMException("The operation was aborted.", "AbortError");
    }

    const pair = this.pairs.find(
      (p) =>
        p.request.method === method && p.request.path === path && bodyMatches(p.request.json, body),
    );
    if (!pair) {
      throw new UnmatchedRequestError(
        `no recorded pair for ${method} ${path} body=${JSON.stringify(body).slice(0, 200)}`,
      );
    }
    this.calls.push({ name: pair.name, path, body });

    const res = pair.response;
    if (res.json !== undefined) {
      return new Response(JSON.stringify(res.json), {
        status: res.status,
        headers: { "content-type": res.content_type },
      });
    }
    const bytes = Buffer.from(res.body_base64 ?? "", "base64");
    return new Response(new Uint8Array(bytes), {
      status: res.status,
      headers: { "content-type": res.content_type },
    });
  };
}
