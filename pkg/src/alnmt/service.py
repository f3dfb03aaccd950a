"""HTTP annotation service: the interactive oracle's outward face.

Wraps a live annotation queue in four endpoints. The single-page annotation
client is served from the static directory when one is provided.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .active_loop import AnnotationQueue, RunProgress, StaleLease


class RunStatus(BaseModel):
    iteration: int
    pending_count: int
    labeled_count: int
    pool_count: int
    strategy: str
    running: bool


class TaskOut(BaseModel):
    lease_id: str
    sentence_id: int
    source_text: str
    model_best_hypothesis: str
    score: float
    strategy: str


class SubmitIn(BaseModel):
    lease_id: str
    sentence_id: int
    target_text: str
    annotator: str = Field(default="anonymous", max_length=120)


class SkipIn(BaseModel):
    lease_id: str
    sentence_id: int


class Ack(BaseModel):
    ok: bool = True
    pending_count: int


@dataclass
class LiveRun:
    """What the service needs from a running loop."""
    queue: AnnotationQueue
    progress: RunProgress = field(default_factory=RunProgress)


def create_app(live: LiveRun, static_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="annotation service")

    def _status() -> RunStatus:
        snap = live.progress.snapshot()
        counts = live.queue.counts()
        return RunStatus(
            iteration=max(snap["iteration"], counts["iteration"]),
            pending_count=counts["pending"],
            labeled_count=snap["labeled_base"] + counts["labeled"],
            pool_count=snap["pool_base"] - counts["labeled"],
            strategy=snap["strategy"] or live.queue.strategy,
            running=snap["running"],
        )

    @app.get("/api/run/status", response_model=RunStatus)
    def run_status():
        return _status()

    @app.get("/api/batch/next", response_model=TaskOut, responses={204: {"model": None}})
    def batch_next(annotator: str = "anonymous"):
        task = live.queue.next_task(annotator)
        if task is None:
            return Response(status_code=204)
        return TaskOut(
            lease_id=task.lease_id, sentence_id=task.sentence_id,
            source_text=task.source_text,
            model_best_hypothesis=task.model_best_hypothesis,
            score=task.score, strategy=task.strategy,
        )

    @app.post("/api/batch/submit", response_model=Ack)
    def batch_submit(body: SubmitIn):
        try:
            live.queue.submit(body.lease_id, body.sentence_id, body.target_text,
                              body.annotator)
        except StaleLease as exc:
            raise HTTPException(status_code=409, detail=f"stale-lease: {exc}")
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return Ack(pending_count=live.queue.counts()["pending"])

    @app.post("/api/batch/skip", response_model=Ack)
    def batch_skip(body: SkipIn):
        try:
            live.queue.skip(body.lease_id, body.sentence_id)
        except StaleLease as exc:
            raise HTTPException(status_code=409, detail=f"stale-lease: {exc}")
        return Ack(pending_count=live.queue.counts()["pending"])

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
