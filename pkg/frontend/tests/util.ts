// Shared fetch doubles for the client and app tests. The stand-ins only
// implement the Response surface the client touches (ok/status/json/
// arrayBuffer), so nothing depends on a global fetch implementation.

import type { FetchLike } from "../src/api.js";

export function jsonResponse(body: unknown, status = 200): Response {
  return {
    ok: status >= 200 && status < 300,
    status,
    json: async () => JSON.parse(JSON.stringify(body)) as unknown,
    arrayBuffer: async () => new TextEncoder().encode(JSON.stringify(body)).buffer,
  } as unknown as Response;
}

export function bytesResponse(bytes: Uint8Array, status = 200): Response {
  return {
    ok: status >= 200 && status < 300,
    status,
    json: async () => {
      throw new Error("binary body");
    },
    arrayBuffer: async () => bytes.slice().buffer,
  } as unknown as Response;
}

export function deferred<T>(): { promise: Promise<T>; resolve: (value: T) => void } {
  let resolve!: (value: T) => void;
  const promise = new Promise<T>((res) => {
    resolve = res;
  });
  return { promise, resolve };
}

export interface RecordedCall {
  url: string;
  method: string;
  body: string | null;
}

export function recordingFetch(
  handler: (url: string, init?: RequestInit) => Promise<Response> | Response,
): { fetchImpl: FetchLike; calls: RecordedCall[] } {
  const calls: RecordedCall[] = [];
  const fetchImpl: FetchLike = async (url, init) => {
    calls.push({
      url,
      method: init?.method ?? "GET",
      body: typeof init?.body === "string" ? init.body : null,
    });
    return handler(url, init);
  };
  return { fetchImpl, calls };
}
