import { AnnotationTask, RunStatus, SubmitResult } from "./types.js";

// Thin typed client for the four service endpoints. Every body echoes
// server-issued identifiers verbatim; nothing is fabricated client-side.
export class ApiClient {
  constructor(private baseUrl: string = "") {}

  private url(path: string): string {
    return this.baseUrl + path;
  }

  async status(): Promise<RunStatus> {
    const res = await fetch(this.url("/api/run/status"));
    if (!res.ok) throw new Error(`status endpoint returned ${res.status}`);
    return (await res.json()) as RunStatus;
  }

  async nextTask(annotator: string): Promise<AnnotationTask | null> {
    const query = new URLSearchParams({ annotator });
    const res = await fetch(this.url(`/api/batch/next?${query}`));
    if (res.status === 204) return null;
    if (!res.ok) throw new Error(`next endpoint returned ${res.status}`);
    return (await res.json()) as AnnotationTask;
  }

  async submit(
    task: AnnotationTask,
    targetText: string,
    annotatorTag: string
  ): Promise<SubmitResult> {
    return this.post("/api/batch/submit", {
      lease_id: task.lease_id,
      sentence_id: task.sentence_id,
      target_text: targetText,
      annotator: annotatorTag,
    });
  }

  async skip(task: AnnotationTask): Promise<SubmitResult> {
    return this.post("/api/batch/skip", {
      lease_id: task.lease_id,
      sentence_id: task.sentence_id,
    });
  }

  private async post(path: string, body: unknown): Promise<SubmitResult> {
    const res = await fetch(this.url(path), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (res.ok) {
      const ack = (await res.json()) as { pending_count: number };
      return { ok: true, pendingCount: ack.pending_count };
    }
    const detail = await res
      .json()
      .then((b: any) => String(b.detail ?? res.statusText))
      .catch(() => res.statusText);
    if (res.status === 409) return { ok: false, reason: "stale-lease", detail };
    return { ok: false, reason: "rejected", detail };
  }
}
