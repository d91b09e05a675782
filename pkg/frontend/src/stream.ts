/**
 * Resumable NDJSON event stream over the gateway's
 * GET /sessions/{id}/events?from=SEQ endpoint.
 *
 * Tracks the last sequence number delivered; on any disconnect it
 * resubscribes from lastSeq+1, and anything replayed at or below lastSeq is
 * dropped, so consumers see every event exactly once, in order, across any
 * number of connection drops.
 */

import type { EventRecord } from "./types.js";

export type FetchLike = (url: string) => Promise<{
  ok: boolean;
  status: number;
  body: ReadableStream<Uint8Array> | null;
}>;

export interface StreamOptions {
  fromSeq?: number;
  fetchImpl?: FetchLike;
  retryDelayMs?: number;
  maxRetries?: number;
}

export class EventStream {
  readonly requests: string[] = []; // URLs issued, observable for tests
  private lastSeq: number;

  constructor(
    private readonly baseUrl: string,
    private readonly sessionId: string,
    private readonly options: StreamOptions = {},
  ) {
    this.lastSeq = (options.fromSeq ?? 0) - 1;
  }

  /** Deliver each event once; resolves when the session's stream closes. */
  async run(onEvent: (event: EventRecord) => void): Promise<void> {
    const fetchImpl: FetchLike = this.options.fetchImpl ?? (fetch as unknown as FetchLike);
    const maxRetries = this.options.maxRetries ?? 20;
    const retryDelay = this.options.retryDelayMs ?? 250;
    let failures = 0;

    for (;;) {
      const url = `${this.baseUrl}/sessions/${this.sessionId}/events?from=${this.lastSeq + 1}`;
      this.requests.push(url);
      try {
        const response = await fetchImpl(url);
        if (!response.ok || response.body === null) {
          throw new Error(`stream request failed: ${response.status}`);
        }
        await this.consume(response.body, onEvent);
        return; // clean end of stream: session closed
      } catch (err) {
        failures += 1;
        if (failures > maxRetries) throw err;
        await sleep(retryDelay);
      }
    }
  }

  private async consume(
    body: ReadableStream<Uint8Array>,
    onEvent: (event: EventRecord) => void,
  ): Promise<void> {
    const reader = body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      buffer += decoder.decode(value, { stream: true });
      let newline;
      while ((newline = buffer.indexOf("\n")) >= 0) {
        const line = buffer.slice(0, newline).trim();
        buffer = buffer.slice(newline + 1);
        if (!line) continue;
        const event = JSON.parse(line) as EventRecord;
        if (event.seq <= this.lastSeq) continue; // replayed duplicate
        if (event.seq !== this.lastSeq + 1) {
          throw new Error(`gap: expected seq ${this.lastSeq + 1}, got ${event.seq}`);
        }
        this.lastSeq = event.seq;
        onEvent(event);
      }
    }
  }
}

const sleep = (ms: number) => new Promise((resolve) => setTimeout(resolve, ms));
