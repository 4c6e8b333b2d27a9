/** Controller tying the API client, debouncer, and session state
 * together. Server state is only ever changed through POST /embed and
 * POST /edit; everything the page shows derives from `state`. */

import { ApiClient, ApiError, bytesToBase64 } from "./api.js";
import { LatestWins } from "./debounce.js";
import {
  POSE_AXES,
  type Pose,
  type PoseAxis,
  type SessionState,
  clampToRange,
  initialState,
} from "./state.js";

export const DEBOUNCE_MS = 150;

function isAbort(e: unknown): boolean {
  return e instanceof DOMException && e.name === "AbortError";
}

function describe(e: unknown): string {
  if (e instanceof ApiError) return `${e.code}: ${e.message}`;
  if (e instanceof Error && e.message) return e.message;
  return "request failed";
}

export class Session {
  readonly state: SessionState;
  private readonly debouncer: LatestWins;

  constructor(
    private readonly api: ApiClient,
    private readonly onChange: (state: SessionState) => void = () => {},
    debounceMs: number = DEBOUNCE_MS,
  ) {
    this.state = initialState();
    this.debouncer = new LatestWins(debounceMs, () => {
      this.state.requestInFlight = false;
      this.emit();
    });
  }

  private emit(): void {
    this.onChange(this.state);
  }

  private fail(e: unknown): void {
    this.state.banner = describe(e);
  }

  async createEmbedding(sourcesBase64: string[]): Promise<void> {
    try {
      const res = await this.api.embed(sourcesBase64);
      this.state.embeddedId = res.embedded_id;
      this.state.embeddedPng = res.png_base64;
      this.state.previousId = null;
      this.state.previousPng = null;
      this.state.previewPng = null;
      this.state.filmstrip = [];
      if (res.predicted_pose && res.predicted_pose.length === 3) {
        this.state.predictedPose = [...res.predicted_pose] as Pose;
        this.state.sliders = [...res.predicted_pose] as Pose;
      }
      this.state.banner = null;
    } catch (e) {
      this.fail(e);
    }
    this.emit();
  }

  /** Slider input: update state now, generate after the debounce window. */
  setSlider(axis: PoseAxis, value: number): void {
    const i = POSE_AXES.indexOf(axis);
    this.state.sliders[i] = clampToRange(axis, value);
    this.emit();
    this.scheduleGenerate();
  }

  /** Back to the service's predicted source pose; re-displays the
   * self-driven frame. */
  resetSliders(): void {
    if (!this.state.predictedPose) return;
    this.state.sliders = [...this.state.predictedPose] as Pose;
    this.emit();
    this.scheduleGenerate();
  }

  private scheduleGenerate(): void {
    const id = this.state.embeddedId;
    if (id === null) return;
    const pose = [...this.state.sliders];
    this.debouncer.schedule(async (signal) => {
      this.state.requestInFlight = true;
      this.emit();
      try {
        const png = await this.api.generatePose(id, pose, signal);
        this.state.previewPng = bytesToBase64(png);
        this.state.banner = null;
      } catch (e) {
        if (isAbort(e)) return;
        this.fail(e);
      }
      this.emit();
    });
  }

  /** "Apply": commit the painted overlay, keeping the pre-edit id for
   * Revert. */
  async applyOverlay(overlayBase64: string): Promise<void> {
    const id = this.state.embeddedId;
    if (id === null) return;
    try {
      const res = await this.api.edit(id, overlayBase64);
      this.state.previousId = id;
      this.state.previousPng = this.state.embeddedPng;
      this.state.embeddedId = res.embedded_id;
      this.state.embeddedPng = res.png_base64;
      this.state.banner = null;
    } catch (e) {
      this.fail(e);
    }
    this.emit();
  }

  /** "Revert": back to the pre-edit embedding. The previous id still
   * exists server-side, so this is exact. */
  revert(): void {
    if (this.state.previousId === null) return;
    this.state.embeddedId = this.state.previousId;
    this.state.embeddedPng = this.state.previousPng;
    this.state.previousId = null;
    this.state.previousPng = null;
    this.emit();
  }

  /** "Preview sequence": one generate per driving frame, sequential so
   * at most one request is in flight. */
  async previewSequence(drivingBase64: string[]): Promise<void> {
    const id = this.state.embeddedId;
    if (id === null) return;
    this.state.filmstrip = [];
    this.state.requestInFlight = true;
    this.emit();
    try {
      for (const driving of drivingBase64) {
        const png = await this.api.generateDriving(id, driving);
        this.state.filmstrip.push(bytesToBase64(png));
        this.emit();
      }
      this.state.banner = null;
    } catch (e) {
      this.fail(e);
    }
    this.state.requestInFlight = false;
    this.emit();
  }
}
