// Mirrors the annotation service schema exactly; lease ids are opaque.

export interface RunStatus {
  iteration: number;
  pending_count: number;
  labeled_count: number;
  pool_count: number;
  strategy: string;
  running: boolean;
}

export interface AnnotationTask {
  lease_id: string;
  sentence_id: number;
  source_text: string;
  model_best_hypothesis: string;
  score: number;
  strategy: string;
}

export type SubmitResult =
  | { ok: true; pendingCount: number }
  | { ok: false; reason: "stale-lease" | "rejected"; detail: string };
