/** Session state and its value types. Every view derives from this state;
 * nothing else on the page carries data. */

export type Pose = [number, number, number];

export const POSE_AXES = ["tx", "ty", "rot"] as const;
export type PoseAxis = (typeof POSE_AXES)[number];

/** Slider ranges track the renderer's pose ranges: translations in
 * normalized image units, rotation in degrees. */
export const SLIDER_RANGES: Record<PoseAxis, { min: number; max: number; step: number }> = {
  tx: { min: -0.25, max: 0.25, step: 0.01 },
  ty: { min: -0.25, max: 0.25, step: 0.01 },
  rot: { min: -30, max: 30, step: 0.5 },
};

export interface BrushSettings {
  color: [number, number, number];
  radius: number;
  opacity: number;
}

export interface SessionState {
  /** Embedding the next generate/edit call targets. */
  embeddedId: string | null;
  /** Preview of the current embedded face, base64 PNG. */
  embeddedPng: string | null;
  /** Pre-edit id and preview, kept so Revert is exact. */
  previousId: string | null;
  previousPng: string | null;
  /** Source pose as predicted by the service, used by Reset. */
  predictedPose: Pose | null;
  sliders: Pose;
  brush: BrushSettings;
  /** Last generated frame, base64 PNG. */
  previewPng: string | null;
  /** Sequence previews from driving frames, base64 PNGs in order. */
  filmstrip: string[];
  requestInFlight: boolean;
  /** Inline error banner; null when the last request succeeded. */
  banner: string | null;
}

export function initialState(): SessionState {
  return {
    embeddedId: null,
    embeddedPng: null,
    previousId: null,
    previousPng: null,
    predictedPose: null,
    sliders: [0, 0, 0],
    brush: { color: [255, 0, 0], radius: 3, opacity: 1 },
    previewPng: null,
    filmstrip: [],
    requestInFlight: false,
    banner: null,
  };
}

export function clampToRange(axis: PoseAxis, value: number): number {
  const { min, max } = SLIDER_RANGES[axis];
  return Math.min(max, Math.max(min, value));
}

/** Numeric display next to each slider. */
export function formatSliderValue(axis: PoseAxis, value: number): string {
  return axis === "rot" ? `${value.toFixed(1)}°` : value.toFixed(3);
}
