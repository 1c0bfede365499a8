/** Typed client for the memory service HTTP API. */

export interface TokenUsage {
  prompt_tokens: number;
  completion_tokens: number;
}

export interface AskResponse {
  answer: string;
  usage: TokenUsage;
  trace: string[];
  gave_up: boolean;
  forgotten_indicated: boolean;
  snapshot_version: number;
}

export interface FeedbackResponse {
  rules_version: number;
}

export interface RulesResponse {
  version: number;
  rules: string[];
}

export interface SweepSummary {
  forgotten: number;
  extended: number;
  visited: number;
  interrupted: boolean;
}

export interface Metrics {
  received: number;
  processed: number;
  pending: number;
  current_delay_seconds: number;
  tree_version: number;
  node_count: number;
  goal_plus_count: number;
  rules_version: number;
  last_sweep: SweepSummary | null;
}

export interface EventIn {
  at: number;
  kind: string;
  attributes: Record<string, string>;
}

export class ServiceUnreachable extends Error {
  constructor(cause: unknown) {
    super(`memory service unreachable: ${cause}`);
  }
}

export class ApiClient {
  constructor(readonly baseUrl: string) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await fetch(this.url(path), init);
    } catch (error) {
      throw new ServiceUnreachable(error);
    }
    if (!response.ok) {
      throw new Error(`${path} failed: ${response.status} ${await response.text()}`);
    }
    return (await response.json()) as T;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  ask(text: string): Promise<AskResponse> {
    return this.post<AskResponse>("/ask", { text });
  }

  feedback(text: string): Promise<FeedbackResponse> {
    return this.post<FeedbackResponse>("/feedback", { text });
  }

  postEvent(event: EventIn): Promise<{ queue_depth: number }> {
    return this.post<{ queue_depth: number }>("/events", event);
  }

  fetchRules(): Promise<RulesResponse> {
    return this.request<RulesResponse>("/rules");
  }

  fetchMetrics(): Promise<Metrics> {
    return this.request<Metrics>("/metrics");
  }

  /** Raw emtree/1 snapshot text; unknown versions fall back to the latest. */
  async fetchTreeText(version?: number): Promise<string> {
    const path = version === undefined ? "/tree" : `/tree?version=${version}`;
    let response: Response;
    try {
      response = await fetch(this.url(path));
    } catch (error) {
      throw new ServiceUnreachable(error);
    }
    if (response.status === 404 && version !== undefined) {
      return this.fetchTreeText();
    }
    if (!response.ok) {
      throw new Error(`/tree failed: ${response.status}`);
    }
    return response.text();
  }

  async healthy(): Promise<boolean> {
    try {
      await this.request<{ status: string }>("/health");
      return true;
    } catch {
      return false;
    }
  }
}
