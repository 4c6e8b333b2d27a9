/** Typed fetch client for the inference service. All requests use the
 * base64 JSON forms of the endpoints so that every interaction is a
 * plain, recordable request/response pair. */

export interface EmbedResponse {
  embedded_id: string;
  png_base64: string;
  predicted_pose?: number[];
}

export interface EditResponse {
  embedded_id: string;
  png_base64: string;
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export function bytesToBase64(bytes: Uint8Array): string {
  let bin = "";
  const chunk = 0x8000;
  for (let i = 0; i < bytes.length; i += chunk) {
    bin += String.fromCharCode(...bytes.subarray(i, i + chunk));
  }
  return btoa(bin);
}

export function base64ToBytes(b64: string): Uint8Array {
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

async function errorFrom(res: Response): Promise<ApiError> {
  try {
    const body = (await res.json()) as { code?: string; message?: string };
    if (typeof body.code === "string" && typeof body.message === "string") {
      return new ApiError(res.status, body.code, body.message);
    }
  } catch {
    // not a JSON error body; fall through
  }
  return new ApiError(res.status, "http-error", `request failed with status ${res.status}`);
}

export class ApiClient {
  private readonly fetchFn: typeof fetch;

  constructor(
    private readonly baseUrl: string = "",
    fetchFn?: typeof fetch,
  ) {
    this.fetchFn = fetchFn ?? ((input, init) => globalThis.fetch(input, init));
  }

  private async postJson(path: string, body: unknown, signal?: AbortSignal): Promise<Response> {
    const res = await this.fetchFn(this.baseUrl + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
      signal,
    });
    if (!res.ok) throw await errorFrom(res);
    return res;
  }

  async embed(sourcesBase64: string[]): Promise<EmbedResponse> {
    const res = await this.postJson("/embed", { sources_base64: sourcesBase64 });
    return (await res.json()) as EmbedResponse;
  }

  /** Raw PNG bytes of the generated frame. */
  async generatePose(embeddedId: string, pose: number[], signal?: AbortSignal): Promise<Uint8Array> {
    const res = await this.postJson("/generate", { embedded_id: embeddedId, mode: "pose", pose }, signal);
    return new Uint8Array(await res.arrayBuffer());
  }

  async generateDriving(embeddedId: string, drivingBase64: string, signal?: AbortSignal): Promise<Uint8Array> {
    const res = await this.postJson(
      "/generate",
      { embedded_id: embeddedId, mode: "driving-image", driving_base64: drivingBase64 },
      signal,
    );
    return new Uint8Array(await res.arrayBuffer());
  }

  async generateVectorDelta(embeddedId: string, delta: number[], signal?: AbortSignal): Promise<Uint8Array> {
    const res = await this.postJson(
      "/generate",
      { embedded_id: embeddedId, mode: "vector-delta", vector_delta: delta },
      signal,
    );
    return new Uint8Array(await res.arrayBuffer());
  }

  async edit(embeddedId: string, overlayBase64: string): Promise<EditResponse> {
    const res = await this.postJson("/edit", { embedded_id: embeddedId, overlay_base64: overlayBase64 });
    return (await res.json()) as EditResponse;
  }
}
