// Scrubber and sparkline geometry as pure data: which timeline cells get
// the red localization tint, where the playhead sits, and the polyline for
// the s-curve plot. The DOM layer only paints what it is told.

import type { Segment } from "./types.js";

export interface ScrubberCell {
  t: number;
  tinted: boolean;
  current: boolean;
}

export function scrubberCells(
  timesteps: number,
  segments: readonly Segment[],
  currentT: number,
): ScrubberCell[] {
  const tinted = new Array<boolean>(timesteps).fill(false);
  for (const seg of segments) {
    const a = Math.max(0, seg.t_start);
    const z = Math.min(timesteps - 1, seg.t_end);
    for (let t = a; t <= z; t += 1) {
      tinted[t] = true;
    }
  }
  return tinted.map((flag, t) => ({ t, tinted: flag, current: t === currentT }));
}

// Map the s-curve onto plot coordinates: t spread across the full width,
// s rising from the bottom edge, scaled by the curve maximum so a localized
// peak always reaches the top.
export function sparklinePoints(
  sCurve: readonly number[],
  width: number,
  height: number,
): Array<[number, number]> {
  const n = sCurve.length;
  if (n === 0) {
    return [];
  }
  const top = Math.max(...sCurve, 1e-9);
  return sCurve.map((s, i) => {
    const x = n === 1 ? width / 2 : (i / (n - 1)) * width;
    const y = height - (s / top) * height;
    return [x, y];
  });
}

export function sparklinePath(
  sCurve: readonly number[],
  width: number,
  height: number,
): string {
  return sparklinePoints(sCurve, width, height)
    .map(([x, y], i) => `${i === 0 ? "M" : "L"}${x.toFixed(2)},${y.toFixed(2)}`)
    .join(" ");
}
