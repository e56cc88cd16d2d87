// Alpha compositing of a relevancy heatmap over an RGB render, as plain
// RGBA byte math so it is testable without a canvas. The DOM layer decodes
// the two PNGs into ImageData and passes the buffers through; no relevancy
// values are computed client-side, only server-rendered pixels are mixed.

export function blendOverlay(
  base: Uint8ClampedArray,
  overlay: Uint8ClampedArray,
  alpha: number,
): Uint8ClampedArray {
  if (base.length !== overlay.length) {
    throw new Error(`image size mismatch: ${base.length} vs ${overlay.length} bytes`);
  }
  if (base.length % 4 !== 0) {
    throw new Error("expected RGBA pixel data (length divisible by 4)");
  }
  if (!(alpha >= 0 && alpha <= 1)) {
    throw new Error("alpha must be in [0, 1]");
  }
  const out = new Uint8ClampedArray(base);
  if (alpha === 0) {
    // Contract: alpha 0 is byte-identical to the plain RGB render.
    return out;
  }
  for (let i = 0; i < out.length; i += 4) {
    // Mix color channels only; the base alpha channel is kept as-is.
    out[i] = Math.round(base[i] * (1 - alpha) + overlay[i] * alpha);
    out[i + 1] = Math.round(base[i + 1] * (1 - alpha) + overlay[i + 1] * alpha);
    out[i + 2] = Math.round(base[i + 2] * (1 - alpha) + overlay[i + 2] * alpha);
  }
  return out;
}
