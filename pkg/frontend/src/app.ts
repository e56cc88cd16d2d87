// Wires the pure state reducer to the DOM. Data flows one way:
// user/DOM event -> reduce -> syncDom(state), with service calls as the only
// side effects. Painting goes through an injected Painter so tests can run
// under jsdom (which has no canvas) and the browser entry point can decode
// PNGs for real.

import { ApiClient, ServiceError, parseEmbedding } from "./api.js";
import {
  canRequestHighlight,
  initialState,
  reduce,
  type ViewerEvent,
  type ViewerState,
} from "./state.js";
import { scrubberCells, sparklinePath } from "./scrubber.js";
import type { HighlightEffect, OverlayMode, QueryRequest } from "./types.js";

export interface Painter {
  paintRgb(png: Uint8Array): void | Promise<void>;
  paintRelevancy(png: Uint8Array): void | Promise<void>;
  paintBlended(
    rgbPng: Uint8Array,
    relevancyPng: Uint8Array,
    alpha: number,
  ): void | Promise<void>;
}

const noopPainter: Painter = {
  paintRgb: () => undefined,
  paintRelevancy: () => undefined,
  paintBlended: () => undefined,
};

export interface AppOptions {
  root: HTMLElement;
  client: ApiClient;
  painter?: Painter;
  pollIntervalMs?: number;
}

const TEMPLATE = `
<div class="viewer">
  <header class="topbar">
    <h1>legs4</h1>
    <span id="scene-label"></span>
  </header>
  <div id="banner" class="banner hidden"></div>
  <section class="query-row">
    <input id="query-text" type="text"
           placeholder="describe what to find, e.g. a red cluster flaring" />
    <textarea id="query-embedding" rows="1"
              placeholder="or paste an embedding (JSON array or comma separated)"></textarea>
    <button id="submit-query" type="button">Query</button>
  </section>
  <section class="frame-row">
    <canvas id="frame-view" width="256" height="256"></canvas>
    <div class="frame-controls">
      <label>camera
        <select id="camera-select"></select>
      </label>
      <label>overlay
        <select id="overlay-mode">
          <option value="rgb">rgb</option>
          <option value="relevancy">relevancy</option>
          <option value="blended">blended</option>
        </select>
      </label>
      <label>alpha
        <input id="alpha-slider" type="range" min="0" max="1" step="0.05" />
      </label>
    </div>
  </section>
  <section class="timeline">
    <svg id="sparkline" viewBox="0 0 300 40" preserveAspectRatio="none">
      <path id="sparkline-path" fill="none" />
    </svg>
    <div id="scrubber"></div>
    <div class="t-row">
      <input id="t-slider" type="range" min="0" max="0" step="1" />
      <span id="t-label"></span>
    </div>
  </section>
  <section class="highlight-row">
    <label>effect
      <select id="effect-select">
        <option value="bullet_time">bullet time</option>
        <option value="zoom">zoom</option>
        <option value="desaturate">desaturate</option>
      </select>
    </label>
    <button id="highlight-btn" type="button" disabled>Highlight</button>
    <span id="highlight-status"></span>
    <div id="filmstrip"></div>
  </section>
</div>
`;

export class ViewerApp {
  state: ViewerState = initialState();

  // Last async operation kicked off by a DOM event, so tests can await it.
  lastOp: Promise<void> = Promise.resolve();

  private readonly client: ApiClient;
  private readonly painter: Painter;
  private readonly pollIntervalMs: number;
  private readonly el: {
    banner: HTMLDivElement;
    sceneLabel: HTMLSpanElement;
    queryText: HTMLInputElement;
    queryEmbedding: HTMLTextAreaElement;
    submitQuery: HTMLButtonElement;
    cameraSelect: HTMLSelectElement;
    overlayMode: HTMLSelectElement;
    alphaSlider: HTMLInputElement;
    sparklinePath: SVGPathElement;
    scrubber: HTMLDivElement;
    tSlider: HTMLInputElement;
    tLabel: HTMLSpanElement;
    effectSelect: HTMLSelectElement;
    highlightBtn: HTMLButtonElement;
    highlightStatus: HTMLSpanElement;
    filmstrip: HTMLDivElement;
  };

  constructor(opts: AppOptions) {
    this.client = opts.client;
    this.painter = opts.painter ?? noopPainter;
    this.pollIntervalMs = opts.pollIntervalMs ?? 500;
    opts.root.innerHTML = TEMPLATE;
    const pick = <T extends Element>(id: string): T => {
      const node = opts.root.querySelector(`#${id}`);
      if (node === null) {
        throw new Error(`viewer template is missing #${id}`);
      }
      return node as T;
    };
    this.el = {
      banner: pick("banner"),
      sceneLabel: pick("scene-label"),
      queryText: pick("query-text"),
      queryEmbedding: pick("query-embedding"),
      submitQuery: pick("submit-query"),
      cameraSelect: pick("camera-select"),
      overlayMode: pick("overlay-mode"),
      alphaSlider: pick("alpha-slider"),
      sparklinePath: pick("sparkline-path"),
      scrubber: pick("scrubber"),
      tSlider: pick("t-slider"),
      tLabel: pick("t-label"),
      effectSelect: pick("effect-select"),
      highlightBtn: pick("highlight-btn"),
      highlightStatus: pick("highlight-status"),
      filmstrip: pick("filmstrip"),
    };
    this.bind();
    this.syncDom();
  }

  private bind(): void {
    this.el.submitQuery.addEventListener("click", () => {
      this.lastOp = this.submitFromInputs();
    });
    this.el.queryText.addEventListener("keydown", (ev: KeyboardEvent) => {
      if (ev.key === "Enter") {
        this.lastOp = this.submitFromInputs();
      }
    });
    this.el.tSlider.addEventListener("input", () => {
      this.lastOp = this.scrub(Number(this.el.tSlider.value));
    });
    this.el.cameraSelect.addEventListener("change", () => {
      this.lastOp = this.selectCamera(this.el.cameraSelect.value);
    });
    this.el.overlayMode.addEventListener("change", () => {
      this.lastOp = this.setOverlay(
        this.el.overlayMode.value as OverlayMode,
        Number(this.el.alphaSlider.value),
      );
    });
    this.el.alphaSlider.addEventListener("input", () => {
      this.lastOp = this.setOverlay(
        this.el.overlayMode.value as OverlayMode,
        Number(this.el.alphaSlider.value),
      );
    });
    this.el.highlightBtn.addEventListener("click", () => {
      this.lastOp = this.requestHighlight();
    });
  }

  dispatch(event: ViewerEvent): void {
    this.state = reduce(this.state, event);
    this.syncDom();
  }

  // Load the scene list and show the first scene.
  async start(): Promise<void> {
    try {
      const listing = await this.client.scenes();
      if (listing.scenes.length === 0) {
        this.dispatch({ kind: "query-failed", message: "service has no scenes" });
        return;
      }
      this.dispatch({ kind: "scene-selected", scene: listing.scenes[0] });
      await this.refreshImage();
    } catch (exc) {
      this.dispatch({ kind: "query-failed", message: messageOf(exc) });
    }
  }

  // Read the query inputs and submit. A non-empty embedding paste wins over
  // the text field and is validated client-side before any request.
  async submitFromInputs(): Promise<void> {
    if (this.state.scene === null) {
      return;
    }
    const body: QueryRequest = { scene: this.state.scene.id };
    const pasted = this.el.queryEmbedding.value.trim();
    const text = this.el.queryText.value.trim();
    if (pasted.length > 0) {
      try {
        body.embedding = parseEmbedding(pasted);
      } catch (exc) {
        this.dispatch({ kind: "query-failed", message: messageOf(exc) });
        return;
      }
    } else if (text.length > 0) {
      body.text = text;
    } else {
      this.dispatch({ kind: "query-failed", message: "type a query or paste an embedding" });
      return;
    }
    try {
      const resp = await this.client.submitQuery(body);
      if (resp === null) {
        return;
      }
      this.dispatch({ kind: "query-succeeded", response: resp });
      await this.refreshImage();
    } catch (exc) {
      this.dispatch({ kind: "query-failed", message: messageOf(exc) });
    }
  }

  async scrub(t: number): Promise<void> {
    this.dispatch({ kind: "scrubbed", t });
    await this.refreshImage();
  }

  async selectCamera(camera: string): Promise<void> {
    this.dispatch({ kind: "camera-selected", camera });
    await this.refreshImage();
  }

  async setOverlay(mode: OverlayMode, alpha?: number): Promise<void> {
    this.dispatch({ kind: "overlay-set", mode, alpha });
    await this.refreshImage();
  }

  // Fetch and paint the current frame in the current overlay mode. Stale
  // render responses come back as null and are skipped; a 404 means the
  // cached query no longer matches what the server has.
  async refreshImage(): Promise<void> {
    const { scene, camera, queryId, overlayMode, alpha, t } = this.state;
    if (scene === null || camera === null) {
      return;
    }
    const base = { scene: scene.id, t, camera } as const;
    try {
      if (overlayMode === "rgb" || queryId === null) {
        const png = await this.client.fetchRender({ ...base, mode: "rgb" });
        if (png !== null) {
          await this.painter.paintRgb(png);
        }
        return;
      }
      if (overlayMode === "relevancy") {
        const png = await this.client.fetchRender({
          ...base,
          mode: "relevancy",
          queryId,
        });
        if (png !== null) {
          await this.painter.paintRelevancy(png);
        }
        return;
      }
      const [rgb, rel] = await Promise.all([
        this.client.fetchRender({ ...base, mode: "rgb" }),
        this.client.fetchRender({ ...base, mode: "relevancy", queryId }),
      ]);
      if (rgb !== null && rel !== null) {
        await this.painter.paintBlended(rgb, rel, alpha);
      }
    } catch (exc) {
      if (exc instanceof ServiceError && exc.status === 404) {
        this.dispatch({ kind: "render-missed" });
      } else {
        this.dispatch({ kind: "query-failed", message: messageOf(exc) });
      }
    }
  }

  async requestHighlight(): Promise<void> {
    const { scene, queryId } = this.state;
    if (scene === null || queryId === null || !canRequestHighlight(this.state)) {
      return;
    }
    try {
      const jobId = await this.client.submitHighlight({
        scene: scene.id,
        query_id: queryId,
        effect: this.el.effectSelect.value as HighlightEffect,
        frames: 12,
      });
      this.dispatch({ kind: "highlight-submitted", jobId });
      await this.client.pollHighlight(
        jobId,
        { intervalMs: this.pollIntervalMs },
        (job) => this.dispatch({ kind: "highlight-updated", job }),
      );
    } catch (exc) {
      const message =
        exc instanceof ServiceError && exc.status === 409
          ? "query not localizable"
          : messageOf(exc);
      this.dispatch({ kind: "highlight-rejected", message });
    }
  }

  private syncDom(): void {
    const s = this.state;
    this.el.banner.textContent = s.banner ?? "";
    this.el.banner.classList.toggle("hidden", s.banner === null);
    this.el.sceneLabel.textContent = s.scene === null ? "no scene" : s.scene.id;

    this.syncCameras();
    this.el.overlayMode.value = s.overlayMode;
    this.el.alphaSlider.value = String(s.alpha);

    const T = s.scene === null ? 1 : s.scene.timesteps;
    this.el.tSlider.max = String(T - 1);
    this.el.tSlider.value = String(s.t);
    this.el.tLabel.textContent = `t = ${s.t} / ${T - 1}`;

    this.el.sparklinePath.setAttribute("d", sparklinePath(s.sCurve, 300, 40));

    this.el.scrubber.replaceChildren(
      ...scrubberCells(T, s.segments, s.t).map((cell) => {
        const span = document.createElement("span");
        span.className = "cell";
        span.classList.toggle("tinted", cell.tinted);
        span.classList.toggle("current", cell.current);
        span.dataset.t = String(cell.t);
        span.title = `t = ${cell.t}`;
        return span;
      }),
    );

    this.el.highlightBtn.disabled = !canRequestHighlight(s);
    this.el.highlightStatus.textContent =
      s.highlight.phase === "idle" ? "" : s.highlight.phase;
    this.el.filmstrip.replaceChildren(
      ...s.highlight.frames.map((frame, i) => {
        const img = document.createElement("img");
        img.src = `data:image/png;base64,${frame}`;
        img.alt = `highlight frame ${i}`;
        img.className = "film-frame";
        return img;
      }),
    );
  }

  private syncCameras(): void {
    const cams = this.state.scene === null ? [] : this.state.scene.cameras;
    const wanted = cams.map((c) => String(c.id));
    const current = Array.from(this.el.cameraSelect.options).map((o) => o.value);
    if (wanted.length !== current.length || wanted.some((v, i) => v !== current[i])) {
      this.el.cameraSelect.replaceChildren(
        ...wanted.map((v) => {
          const opt = document.createElement("option");
          opt.value = v;
          opt.textContent = `camera ${v}`;
          return opt;
        }),
      );
    }
    if (this.state.camera !== null) {
      this.el.cameraSelect.value = this.state.camera;
    }
  }
}

function messageOf(exc: unknown): string {
  return exc instanceof Error ? exc.message : String(exc);
}

export function mountViewer(opts: AppOptions): ViewerApp {
  return new ViewerApp(opts);
}
