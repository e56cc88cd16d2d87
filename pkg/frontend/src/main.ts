// Browser entry point: a canvas-backed painter plus app mount. The service
// origin defaults to the page origin and can be overridden with ?api=URL
// when the viewer is served separately from the query service.

import { ApiClient } from "./api.js";
import { mountViewer, type Painter } from "./app.js";
import { blendOverlay } from "./blend.js";

// The target canvas lives inside the app template, so it is looked up at
// paint time rather than captured at construction.
class CanvasPainter implements Painter {
  constructor(private readonly findCanvas: () => HTMLCanvasElement | null) {}

  private target(): { canvas: HTMLCanvasElement; ctx: CanvasRenderingContext2D } {
    const canvas = this.findCanvas();
    if (canvas === null) {
      throw new Error("frame canvas not mounted");
    }
    const ctx = canvas.getContext("2d");
    if (ctx === null) {
      throw new Error("2d canvas context unavailable");
    }
    return { canvas, ctx };
  }

  private async decode(png: Uint8Array): Promise<ImageBitmap> {
    const blob = new Blob([png.buffer as ArrayBuffer], { type: "image/png" });
    return createImageBitmap(blob);
  }

  private draw(bitmap: ImageBitmap): void {
    const { canvas, ctx } = this.target();
    canvas.width = bitmap.width;
    canvas.height = bitmap.height;
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(bitmap, 0, 0);
  }

  async paintRgb(png: Uint8Array): Promise<void> {
    this.draw(await this.decode(png));
  }

  async paintRelevancy(png: Uint8Array): Promise<void> {
    this.draw(await this.decode(png));
  }

  async paintBlended(
    rgbPng: Uint8Array,
    relevancyPng: Uint8Array,
    alpha: number,
  ): Promise<void> {
    const [rgb, rel] = await Promise.all([
      this.decode(rgbPng),
      this.decode(relevancyPng),
    ]);
    const scratch = document.createElement("canvas");
    scratch.width = rgb.width;
    scratch.height = rgb.height;
    const sctx = scratch.getContext("2d");
    if (sctx === null) {
      throw new Error("2d canvas context unavailable");
    }
    sctx.drawImage(rgb, 0, 0);
    const base = sctx.getImageData(0, 0, rgb.width, rgb.height);
    sctx.clearRect(0, 0, rgb.width, rgb.height);
    sctx.drawImage(rel, 0, 0);
    const overlay = sctx.getImageData(0, 0, rgb.width, rgb.height);
    // Copy into a fresh buffer so the array is plain-ArrayBuffer backed,
    // which is what ImageData requires.
    const mixed = new ImageData(
      new Uint8ClampedArray(blendOverlay(base.data, overlay.data, alpha)),
      rgb.width,
      rgb.height,
    );
    const { canvas, ctx } = this.target();
    canvas.width = rgb.width;
    canvas.height = rgb.height;
    ctx.putImageData(mixed, 0, 0);
  }
}

function apiBase(): string {
  const override = new URLSearchParams(window.location.search).get("api");
  return override ?? "";
}

window.addEventListener("DOMContentLoaded", () => {
  const root = document.getElementById("app");
  if (root === null) {
    throw new Error("missing #app mount point");
  }
  const painter = new CanvasPainter(() =>
    root.querySelector<HTMLCanvasElement>("#frame-view"),
  );
  const app = mountViewer({ root, client: new ApiClient(apiBase()), painter });
  app.lastOp = app.start();
});
