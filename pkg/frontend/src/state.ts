// Viewer state lives in one immutable record updated by a pure reducer, so
// the screen is a function of (server responses, user events) and replaying
// an event log reproduces it exactly. All clamping rules live here, not in
// the DOM handlers.

import type {
  HighlightJob,
  OverlayMode,
  QueryResponse,
  SceneInfo,
  Segment,
} from "./types.js";

export type HighlightPhase = "idle" | "pending" | "done" | "error";

export interface HighlightState {
  phase: HighlightPhase;
  jobId: string | null;
  frames: string[];
}

export interface ViewerState {
  scene: SceneInfo | null;
  queryId: string | null;
  t: number;
  camera: string | null;
  overlayMode: OverlayMode;
  alpha: number;
  segments: Segment[];
  sCurve: number[];
  primary: Segment | null;
  highlight: HighlightState;
  banner: string | null;
}

export type ViewerEvent =
  | { kind: "scene-selected"; scene: SceneInfo }
  | { kind: "query-succeeded"; response: QueryResponse }
  | { kind: "query-failed"; message: string }
  | { kind: "scrubbed"; t: number }
  | { kind: "camera-selected"; camera: string }
  | { kind: "overlay-set"; mode: OverlayMode; alpha?: number }
  | { kind: "render-missed" }
  | { kind: "highlight-submitted"; jobId: string }
  | { kind: "highlight-updated"; job: HighlightJob }
  | { kind: "highlight-rejected"; message: string };

export function initialState(): ViewerState {
  return {
    scene: null,
    queryId: null,
    t: 0,
    camera: null,
    overlayMode: "rgb",
    alpha: 0.5,
    segments: [],
    sCurve: [],
    primary: null,
    highlight: { phase: "idle", jobId: null, frames: [] },
    banner: null,
  };
}

function clamp(x: number, lo: number, hi: number): number {
  return Math.min(Math.max(x, lo), hi);
}

function timesteps(state: ViewerState): number {
  return state.scene ? state.scene.timesteps : 1;
}

export function reduce(state: ViewerState, event: ViewerEvent): ViewerState {
  switch (event.kind) {
    case "scene-selected": {
      // A scene switch invalidates everything query- or time-related.
      const cams = event.scene.cameras;
      return {
        ...initialState(),
        scene: event.scene,
        camera: cams.length > 0 ? String(cams[0].id) : null,
      };
    }
    case "query-succeeded": {
      const r = event.response;
      return {
        ...state,
        queryId: r.query_id,
        segments: r.segments,
        sCurve: r.s_curve,
        primary: r.primary,
        highlight: { phase: "idle", jobId: null, frames: [] },
        banner: r.segments.length === 0 ? "not found in scene" : null,
      };
    }
    case "query-failed":
      return { ...state, banner: event.message };
    case "scrubbed":
      return { ...state, t: clamp(Math.round(event.t), 0, timesteps(state) - 1) };
    case "camera-selected":
      // Temporal results are view-independent: segments and s-curve stay.
      return { ...state, camera: event.camera };
    case "overlay-set":
      return {
        ...state,
        overlayMode: event.mode,
        alpha: event.alpha === undefined ? state.alpha : clamp(event.alpha, 0, 1),
      };
    case "render-missed":
      return { ...state, banner: "stale query: results no longer match this scene, re-submit" };
    case "highlight-submitted":
      return {
        ...state,
        banner: null,
        highlight: { phase: "pending", jobId: event.jobId, frames: [] },
      };
    case "highlight-updated": {
      const job = event.job;
      const phase: HighlightPhase =
        job.status === "done" ? "done" : job.status === "error" ? "error" : "pending";
      return {
        ...state,
        highlight: { ...state.highlight, phase, frames: job.frames },
        banner: job.status === "error" ? (job.error ?? "highlight failed") : state.banner,
      };
    }
    case "highlight-rejected":
      return {
        ...state,
        banner: event.message,
        highlight: { phase: "error", jobId: null, frames: [] },
      };
  }
}

export function replay(
  events: readonly ViewerEvent[],
  start: ViewerState = initialState(),
): ViewerState {
  return events.reduce(reduce, start);
}

// The highlight button unlocks only once a query has localized something,
// and locks again while a job is in flight.
export function canRequestHighlight(state: ViewerState): boolean {
  return (
    state.queryId !== null &&
    state.segments.length > 0 &&
    state.highlight.phase !== "pending"
  );
}
