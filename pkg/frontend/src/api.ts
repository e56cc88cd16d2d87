// Typed client for the legs4 HTTP service. Two concurrency rules from the
// viewer contract are enforced here rather than in the UI code:
//  - identical in-flight requests are de-duplicated per (endpoint, params);
//  - responses tied to a query id that is no longer the active one are
//    discarded (resolved as null) instead of delivered.

import type {
  HighlightJob,
  HighlightRequest,
  QueryRequest,
  QueryResponse,
  RenderParams,
  ScenesResponse,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ServiceError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(detail);
    this.name = "ServiceError";
  }
}

async function errorOf(resp: Response): Promise<ServiceError> {
  let detail = `request failed with status ${resp.status}`;
  try {
    const body: unknown = await resp.json();
    if (
      typeof body === "object" &&
      body !== null &&
      typeof (body as { detail?: unknown }).detail === "string"
    ) {
      detail = (body as { detail: string }).detail;
    }
  } catch {
    // non-JSON error body; keep the generic message
  }
  return new ServiceError(resp.status, detail);
}

// Client-side validation of a pasted embedding: either a JSON array of
// finite numbers or whitespace/comma separated numbers. Throws before any
// request is made.
export function parseEmbedding(text: string): number[] {
  const trimmed = text.trim();
  if (trimmed.length === 0) {
    throw new Error("embedding paste is empty");
  }
  let values: unknown[];
  if (trimmed.startsWith("[") || trimmed.startsWith("{")) {
    let parsed: unknown;
    try {
      parsed = JSON.parse(trimmed);
    } catch {
      throw new Error("embedding paste is not valid JSON");
    }
    if (!Array.isArray(parsed)) {
      throw new Error("embedding paste must be a JSON array");
    }
    values = parsed;
  } else {
    values = trimmed.split(/[\s,]+/).map((tok) => Number(tok));
  }
  if (values.length === 0) {
    throw new Error("embedding paste is empty");
  }
  if (!values.every((v) => typeof v === "number" && Number.isFinite(v))) {
    throw new Error("embedding paste must contain only finite numbers");
  }
  return values as number[];
}

export class ApiClient {
  private readonly inflight = new Map<string, Promise<unknown>>();
  private activeQueryId: string | null = null;
  private querySeq = 0;

  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl?: FetchLike,
  ) {}

  get currentQueryId(): string | null {
    return this.activeQueryId;
  }

  // Collapse concurrent identical requests onto one promise; the key is the
  // method plus fully serialized params.
  private run<T>(key: string, go: () => Promise<T>): Promise<T> {
    const pending = this.inflight.get(key);
    if (pending !== undefined) {
      return pending as Promise<T>;
    }
    const p = go().finally(() => {
      this.inflight.delete(key);
    });
    this.inflight.set(key, p);
    return p;
  }

  private doFetch(path: string, init?: RequestInit): Promise<Response> {
    const f = this.fetchImpl ?? fetch;
    return f(this.baseUrl + path, init);
  }

  private getJson<T>(path: string): Promise<T> {
    return this.run(`GET ${path}`, async () => {
      const resp = await this.doFetch(path);
      if (!resp.ok) {
        throw await errorOf(resp);
      }
      return (await resp.json()) as T;
    });
  }

  private postJson<T>(path: string, body: unknown): Promise<T> {
    return this.run(`POST ${path} ${JSON.stringify(body)}`, async () => {
      const resp = await this.doFetch(path, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
      });
      if (!resp.ok) {
        throw await errorOf(resp);
      }
      return (await resp.json()) as T;
    });
  }

  health(): Promise<{ status: string; scenes: number }> {
    return this.getJson("/health");
  }

  scenes(): Promise<ScenesResponse> {
    return this.getJson("/scenes");
  }

  // Resolves to null when another query was submitted while this one was in
  // flight; the late response must not overwrite the newer one.
  async submitQuery(body: QueryRequest): Promise<QueryResponse | null> {
    this.querySeq += 1;
    const seq = this.querySeq;
    const resp = await this.postJson<QueryResponse>("/query", body);
    if (seq !== this.querySeq) {
      return null;
    }
    this.activeQueryId = resp.query_id;
    return resp;
  }

  // PNG bytes for one frame. Relevancy renders are tagged with the query id
  // they were issued for; if that id stopped being active while the bytes
  // were in flight, the result is dropped (null).
  async fetchRender(params: RenderParams): Promise<Uint8Array | null> {
    const search = new URLSearchParams({
      scene: params.scene,
      t: String(params.t),
      camera: params.camera,
      mode: params.mode,
    });
    if (params.queryId !== undefined) {
      search.set("query_id", params.queryId);
    }
    const path = `/render?${search.toString()}`;
    const bytes = await this.run(`GET ${path}`, async () => {
      const resp = await this.doFetch(path);
      if (!resp.ok) {
        throw await errorOf(resp);
      }
      return new Uint8Array(await resp.arrayBuffer());
    });
    if (params.queryId !== undefined && params.queryId !== this.activeQueryId) {
      return null;
    }
    return bytes;
  }

  async submitHighlight(body: HighlightRequest): Promise<string> {
    const resp = await this.postJson<{ job_id: string }>("/highlight", body);
    return resp.job_id;
  }

  jobStatus(jobId: string): Promise<HighlightJob> {
    return this.getJson(`/highlight/${jobId}`);
  }

  // Poll until the job leaves "pending"; onUpdate fires for every status
  // seen, including the final one.
  async pollHighlight(
    jobId: string,
    opts: { intervalMs?: number; maxPolls?: number } = {},
    onUpdate?: (job: HighlightJob) => void,
  ): Promise<HighlightJob> {
    const intervalMs = opts.intervalMs ?? 500;
    const maxPolls = opts.maxPolls ?? 240;
    for (let i = 0; i < maxPolls; i += 1) {
      const job = await this.jobStatus(jobId);
      onUpdate?.(job);
      if (job.status !== "pending") {
        return job;
      }
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
    throw new Error(`highlight job ${jobId} still pending after ${maxPolls} polls`);
  }
}
