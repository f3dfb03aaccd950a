import { afterEach, describe, expect, it, vi } from "vitest";
import { ApiClient } from "../src/api.js";
import { AnnotationSession } from "../src/session.js";
import { AnnotationTask } from "../src/types.js";

const TASK: AnnotationTask = {
  lease_id: "lease-1",
  sentence_id: 7,
  source_text: "a b c",
  model_best_hypothesis: "c b a",
  score: 0.42,
  strategy: "least_confidence",
};

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

afterEach(() => {
  vi.restoreAllMocks();
  vi.unstubAllGlobals();
});

describe("ApiClient", () => {
  it("returns null for an empty queue (204)", async () => {
    vi.stubGlobal("fetch", vi.fn().mockResolvedValue(new Response(null, { status: 204 })));
    const api = new ApiClient("");
    expect(await api.nextTask("kim")).toBeNull();
  });

  it("passes the annotator name as a query parameter", async () => {
    const fetchMock = vi.fn().mockResolvedValue(jsonResponse(TASK));
    vi.stubGlobal("fetch", fetchMock);
    await new ApiClient("").nextTask("kim lee");
    expect(fetchMock.mock.calls[0][0]).toContain("annotator=kim+lee");
  });

  it("maps 409 to a stale-lease result", async () => {
    vi.stubGlobal("fetch", vi.fn().mockResolvedValue(
      jsonResponse({ detail: "stale-lease: gone" }, 409)));
    const result = await new ApiClient("").submit(TASK, "text", "kim");
    expect(result).toEqual({ ok: false, reason: "stale-lease", detail: "stale-lease: gone" });
  });

  it("echoes server-issued identifiers verbatim in the submit body", async () => {
    const fetchMock = vi.fn().mockResolvedValue(jsonResponse({ ok: true, pending_count: 3 }));
    vi.stubGlobal("fetch", fetchMock);
    await new ApiClient("").submit(TASK, "c b a", "kim:as-suggested");
    const body = JSON.parse(fetchMock.mock.calls[0][1].body);
    expect(body.lease_id).toBe(TASK.lease_id);
    expect(body.sentence_id).toBe(TASK.sentence_id);
  });
});

describe("AnnotationSession", () => {
  it("moves idle -> task -> idle through a submit", async () => {
    const api = {
      nextTask: vi.fn().mockResolvedValueOnce(TASK).mockResolvedValueOnce(null),
      submit: vi.fn().mockResolvedValue({ ok: true, pendingCount: 0 }),
    } as unknown as ApiClient;
    const session = new AnnotationSession(api, "kim");
    await session.fetchNext();
    expect(session.state).toEqual({ kind: "task", task: TASK });
    const problem = await session.submit("my translation");
    expect(problem).toBeNull();
    expect(session.state.kind).toBe("idle");
  });

  it("blocks empty submissions client-side", async () => {
    const api = { nextTask: vi.fn().mockResolvedValue(TASK), submit: vi.fn() } as any;
    const session = new AnnotationSession(api, "kim");
    await session.fetchNext();
    const problem = await session.submit("   ");
    expect(problem).toMatch(/empty/);
    expect(api.submit).not.toHaveBeenCalled();
  });

  it("marks edited submissions in the annotator tag", async () => {
    const api = { nextTask: vi.fn().mockResolvedValue(TASK) } as any;
    const session = new AnnotationSession(api, "kim");
    await session.fetchNext();
    expect(session.annotatorTag("c b a")).toBe("kim:as-suggested");
    expect(session.annotatorTag("c b a!")).toBe("kim:edited");
  });

  it("refetches on a stale lease", async () => {
    const api = {
      nextTask: vi.fn().mockResolvedValue(TASK),
      submit: vi.fn().mockResolvedValue({ ok: false, reason: "stale-lease", detail: "x" }),
    } as any;
    const session = new AnnotationSession(api, "kim");
    await session.fetchNext();
    const problem = await session.submit("text");
    expect(problem).toMatch(/lease/);
    expect(api.nextTask).toHaveBeenCalledTimes(2);
  });

  it("backs off exponentially while offline", async () => {
    const api = { nextTask: vi.fn().mockRejectedValue(new Error("down")) } as any;
    const session = new AnnotationSession(api, "kim",
      { idlePollMs: 10, backoffBaseMs: 100, backoffMaxMs: 1000 });
    await session.fetchNext();
    expect(session.state.kind).toBe("offline");
    const first = session.retryDelayMs();
    await session.fetchNext();
    const second = session.retryDelayMs();
    expect(second).toBe(first * 2);
    await session.fetchNext();
    await session.fetchNext();
    await session.fetchNext();
    expect(session.retryDelayMs()).toBeLessThanOrEqual(1000);
  });

  it("recovers to a task after the service returns", async () => {
    const api = {
      nextTask: vi.fn().mockRejectedValueOnce(new Error("down")).mockResolvedValue(TASK),
    } as any;
    const session = new AnnotationSession(api, "kim");
    await session.fetchNext();
    expect(session.state.kind).toBe("offline");
    await session.fetchNext();
    expect(session.state.kind).toBe("task");
  });
});
