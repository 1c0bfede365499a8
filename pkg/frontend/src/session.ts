/** Console session state: append-only transcript, pinned versions, routing. */

import { ApiClient, ServiceUnreachable } from "./api.js";

export type RouteKind = "ask" | "feedback";
export type TurnMode = RouteKind | "auto";

export interface ChatEntry {
  who: "user" | "robot";
  text: string;
  forgotten?: boolean;
  tokens?: number;
  rulesVersion?: number;
  snapshotVersion?: number;
  error?: boolean;
}

const FEEDBACK_HINT =
  /should (always )?remember|important to remember|would have been important|remember that/i;

/** Mirror of the dialog manager's fallback routing, for the auto toggle. */
export function detectRoute(text: string): RouteKind {
  return FEEDBACK_HINT.test(text) ? "feedback" : "ask";
}

export class ConsoleSession {
  readonly transcript: ChatEntry[] = [];
  pinnedSnapshotVersion = 0;
  rulesVersion = 0;
  serviceDown = false;

  constructor(private readonly api: ApiClient) {}

  /** One chat turn: POST /ask or /feedback per the mode (auto-detected by default). */
  async chatTurn(text: string, mode: TurnMode = "auto"): Promise<ChatEntry> {
    const route = mode === "auto" ? detectRoute(text) : mode;
    this.transcript.push({ who: "user", text });
    let entry: ChatEntry;
    try {
      if (route === "feedback") {
        const result = await this.api.feedback(text);
        this.rulesVersion = result.rules_version;
        entry = {
          who: "robot",
          text: `Noted. Relevance rules are now at version ${result.rules_version}.`,
          rulesVersion: result.rules_version,
        };
      } else {
        const result = await this.api.ask(text);
        this.pinnedSnapshotVersion = result.snapshot_version;
        entry = {
          who: "robot",
          text: result.answer,
          forgotten: result.forgotten_indicated,
          tokens: result.usage.prompt_tokens + result.usage.completion_tokens,
          snapshotVersion: result.snapshot_version,
        };
      }
      this.serviceDown = false;
    } catch (error) {
      this.serviceDown = error instanceof ServiceUnreachable;
      entry = { who: "robot", text: "The memory service is not reachable.", error: true };
    }
    this.transcript.push(entry);
    return entry;
  }
}

/** Small poll-and-subscribe store for /metrics and /rules (2 s cadence). */
export class PollingStore<T> {
  value: T | null = null;
  private listeners = new Set<(value: T) => void>();
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private readonly fetcher: () => Promise<T>,
    private readonly intervalMs = 2000,
  ) {}

  subscribe(listener: (value: T) => void): () => void {
    this.listeners.add(listener);
    if (this.value !== null) {
      listener(this.value);
    }
    return () => this.listeners.delete(listener);
  }

  async refresh(): Promise<T | null> {
    try {
      this.value = await this.fetcher();
      for (const listener of this.listeners) {
        listener(this.value);
      }
    } catch {
      // keep the last value; the banner reflects health separately
    }
    return this.value;
  }

  start(): void {
    if (this.timer === null) {
      void this.refresh();
      this.timer = setInterval(() => void this.refresh(), this.intervalMs);
    }
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }
}
