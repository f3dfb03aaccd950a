import { ApiClient } from "./api.js";
import { AnnotationTask } from "./types.js";

export type SessionState =
  | { kind: "idle" }
  | { kind: "task"; task: AnnotationTask }
  | { kind: "offline"; retryInMs: number }
  | { kind: "error"; message: string };

export interface SessionOptions {
  idlePollMs: number;
  backoffBaseMs: number;
  backoffMaxMs: number;
}

const DEFAULTS: SessionOptions = {
  idlePollMs: 1500,
  backoffBaseMs: 500,
  backoffMaxMs: 15000,
};

// One annotator's workflow: fetch -> (submit | skip) -> fetch. Network
// failures back off exponentially; a stale lease just refetches. The
// "edited from suggestion" marker travels in the annotator tag.
export class AnnotationSession {
  state: SessionState = { kind: "idle" };
  private failures = 0;
  private listeners: Array<(s: SessionState) => void> = [];

  constructor(
    private api: ApiClient,
    public annotator: string,
    private opts: SessionOptions = DEFAULTS
  ) {}

  onChange(listener: (s: SessionState) => void): void {
    this.listeners.push(listener);
  }

  private setState(state: SessionState): void {
    this.state = state;
    for (const listener of this.listeners) listener(state);
  }

  retryDelayMs(): number {
    const ms = this.opts.backoffBaseMs * 2 ** Math.max(0, this.failures - 1);
    return Math.min(ms, this.opts.backoffMaxMs);
  }

  async fetchNext(): Promise<SessionState> {
    try {
      const task = await this.api.nextTask(this.annotator);
      this.failures = 0;
      this.setState(task === null ? { kind: "idle" } : { kind: "task", task });
    } catch (err) {
      this.failures += 1;
      this.setState({ kind: "offline", retryInMs: this.retryDelayMs() });
    }
    return this.state;
  }

  annotatorTag(targetText: string): string {
    if (this.state.kind !== "task") return this.annotator;
    const edited = targetText.trim() !== this.state.task.model_best_hypothesis.trim();
    return `${this.annotator}:${edited ? "edited" : "as-suggested"}`;
  }

  // Returns null on success, or a user-facing problem description.
  async submit(targetText: string): Promise<string | null> {
    if (this.state.kind !== "task") return "no task to submit";
    if (!targetText.trim()) return "translation must not be empty";
    const task = this.state.task;
    try {
      const result = await this.api.submit(task, targetText.trim(), this.annotatorTag(targetText));
      if (!result.ok) {
        await this.fetchNext();
        return result.reason === "stale-lease"
          ? "lease expired; fetched a fresh task"
          : result.detail;
      }
      this.failures = 0;
      await this.fetchNext();
      return null;
    } catch (err) {
      this.failures += 1;
      this.setState({ kind: "offline", retryInMs: this.retryDelayMs() });
      return "network failure; will retry";
    }
  }

  async skip(): Promise<string | null> {
    if (this.state.kind !== "task") return "no task to skip";
    const task = this.state.task;
    try {
      const result = await this.api.skip(task);
      await this.fetchNext();
      return result.ok || result.reason === "stale-lease" ? null : result.detail;
    } catch (err) {
      this.failures += 1;
      this.setState({ kind: "offline", retryInMs: this.retryDelayMs() });
      return "network failure; will retry";
    }
  }
}
