import { ApiClient } from "./api.js";
import { AnnotationSession } from "./session.js";
import { RunStatus } from "./types.js";

const api = new ApiClient("");

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const nameInput = el<HTMLInputElement>("annotator-name");
const startButton = el<HTMLButtonElement>("start");
const statusBar = el<HTMLElement>("status-bar");
const offlineBanner = el<HTMLElement>("offline-banner");
const workbench = el<HTMLElement>("workbench");
const idleCard = el<HTMLElement>("idle-card");
const taskCard = el<HTMLElement>("task-card");
const sourceText = el<HTMLElement>("source-text");
const scoreLine = el<HTMLElement>("score-line");
const editedMarker = el<HTMLElement>("edited-marker");
const targetBox = el<HTMLTextAreaElement>("target-text");
const submitButton = el<HTMLButtonElement>("submit");
const skipButton = el<HTMLButtonElement>("skip");
const problemLine = el<HTMLElement>("problem");

// the annotator name is the only thing persisted client-side
nameInput.value = localStorage.getItem("annotator-name") ?? "";

let session: AnnotationSession | null = null;
let pollTimer: number | undefined;

function renderStatus(status: RunStatus): void {
  statusBar.textContent =
    `iteration ${status.iteration} · strategy ${status.strategy} · ` +
    `pending ${status.pending_count} · labeled ${status.labeled_count} · ` +
    `pool ${status.pool_count} · ${status.running ? "loop running" : "loop idle"}`;
}

async function pollStatus(): Promise<void> {
  try {
    renderStatus(await api.status());
    offlineBanner.hidden = true;
  } catch {
    offlineBanner.hidden = false;
  }
}

function render(): void {
  if (!session) return;
  const state = session.state;
  offlineBanner.hidden = state.kind !== "offline";
  taskCard.hidden = state.kind !== "task";
  idleCard.hidden = state.kind === "task";
  if (state.kind === "task") {
    sourceText.textContent = state.task.source_text;
    scoreLine.textContent =
      `${state.task.strategy} score ${state.task.score.toFixed(4)} · ` +
      `sentence #${state.task.sentence_id}`;
    targetBox.value = state.task.model_best_hypothesis;
    editedMarker.hidden = true;
    problemLine.textContent = "";
    targetBox.focus();
  } else if (state.kind === "offline") {
    window.setTimeout(() => void session?.fetchNext(), state.retryInMs);
  } else if (state.kind === "idle") {
    // auto-poll: a new batch may arrive when the loop finishes fine-tuning
    window.setTimeout(() => void session?.fetchNext(), 1500);
  }
}

targetBox.addEventListener("input", () => {
  if (session?.state.kind === "task") {
    const suggested = session.state.task.model_best_hypothesis.trim();
    editedMarker.hidden = targetBox.value.trim() === suggested;
  }
});

startButton.addEventListener("click", async () => {
  const name = nameInput.value.trim();
  if (!name) {
    problemLine.textContent = "enter an annotator name first";
    return;
  }
  localStorage.setItem("annotator-name", name);
  session = new AnnotationSession(api, name);
  session.onChange(render);
  workbench.hidden = false;
  if (pollTimer === undefined) {
    pollTimer = window.setInterval(() => void pollStatus(), 2000);
  }
  await pollStatus();
  await session.fetchNext();
});

submitButton.addEventListener("click", async () => {
  if (!session) return;
  if (!targetBox.value.trim()) {
    problemLine.textContent = "translation must not be empty";
    return;
  }
  const problem = await session.submit(targetBox.value);
  problemLine.textContent = problem ?? "";
  void pollStatus();
});

skipButton.addEventListener("click", async () => {
  if (!session) return;
  const problem = await session.skip();
  problemLine.textContent = problem ?? "";
  void pollStatus();
});
