import { describe, expect, it } from "vitest";

import { blendOverlay } from "../src/blend.js";

function rgba(...pixels: Array<[number, number, number, number]>): Uint8ClampedArray {
  return new Uint8ClampedArray(pixels.flat());
}

describe("blendOverlay", () => {
  const base = rgba([100, 150, 200, 255], [0, 0, 0, 255], [255, 255, 255, 128]);
  const heat = rgba([50, 250, 10, 255], [255, 0, 0, 255], [1, 2, 3, 255]);

  it("is byte-identical to the base image at alpha 0", () => {
    const out = blendOverlay(base, heat, 0);
    expect(Array.from(out)).toEqual(Array.from(base));
    expect(out).not.toBe(base);
  });

  it("matches the overlay's colors at alpha 1 while keeping base alpha bytes", () => {
    const out = blendOverlay(base, heat, 1);
    expect(Array.from(out.slice(0, 3))).toEqual([50, 250, 10]);
    expect(out[3]).toBe(255);
    expect(out[11]).toBe(128);
  });

  it("mixes channels linearly at intermediate alpha", () => {
    const out = blendOverlay(base, heat, 0.5);
    expect(out[0]).toBe(75);
    expect(out[1]).toBe(200);
    expect(out[2]).toBe(105);
    expect(out[4]).toBe(Math.round(0 * 0.5 + 255 * 0.5));
  });

  it("never mutates its inputs", () => {
    const baseCopy = Array.from(base);
    const heatCopy = Array.from(heat);
    blendOverlay(base, heat, 0.7);
    expect(Array.from(base)).toEqual(baseCopy);
    expect(Array.from(heat)).toEqual(heatCopy);
  });

  it("rejects mismatched or malformed buffers", () => {
    expect(() => blendOverlay(base, heat.slice(0, 8), 0.5)).toThrow(/mismatch/);
    expect(() =>
      blendOverlay(new Uint8ClampedArray(3), new Uint8ClampedArray(3), 0.5),
    ).toThrow(/RGBA/);
  });

  it("rejects alpha outside [0, 1]", () => {
    expect(() => blendOverlay(base, heat, -0.1)).toThrow(/alpha/);
    expect(() => blendOverlay(base, heat, 1.1)).toThrow(/alpha/);
    expect(() => blendOverlay(base, heat, Number.NaN)).toThrow(/alpha/);
  });
});
