// Wire types for the legs4 query service. Field names mirror the JSON
// payloads exactly; the client does no renaming.

export interface Segment {
  t_start: number;
  t_end: number;
  peak: number;
}

export interface CameraInfo {
  id: string | number;
  width: number;
  height: number;
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  world_to_cam: number[];
}

export interface SceneInfo {
  id: string;
  timesteps: number;
  fps: number;
  cameras: CameraInfo[];
  queries: string[];
}

export interface ScenesResponse {
  scenes: SceneInfo[];
}

export interface QueryRequest {
  scene?: string;
  text?: string;
  embedding?: number[];
  canonicals?: number[][];
  dilation?: number;
}

export interface QueryResponse {
  query_id: string;
  scene: string;
  s_curve: number[];
  segments: Segment[];
  primary: Segment | null;
  score: number;
  scores?: Record<string, number>;
}

export type OverlayMode = "rgb" | "relevancy" | "blended";

export type HighlightEffect = "zoom" | "bullet_time" | "desaturate";

export interface HighlightRequest {
  scene: string;
  query_id: string;
  effect: HighlightEffect;
  frames?: number;
  zoom_factor?: number;
  orbit_degrees?: number;
  strength?: number;
}

export type HighlightStatus = "pending" | "done" | "error";

export interface HighlightJob {
  status: HighlightStatus;
  frames: string[];
  error: string | null;
}

export interface RenderParams {
  scene: string;
  t: number;
  camera: string;
  mode: "rgb" | "relevancy";
  queryId?: string;
}
