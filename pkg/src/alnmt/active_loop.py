"""The pool-based active-learning loop.

Each iteration: draw a seeded sample from the remaining pool, score it with
the acquisition strategy, select the top-B sentences, obtain their targets
from the oracle (a lookup of withheld references, or human annotators via the
annotation queue), move them into the labeled set, fine-tune, evaluate, and
journal everything. The journal is an append-only record stream; replaying it
reconstructs the loop state exactly, which is what makes interactive runs
resumable after a crash.
"""

from __future__ import annotations

import json
import math
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from . import acquisition as acq
from . import model as md
from . import trainer as tr
from .corpus import MonolingualPool
from .decoding import Translator
from .bpe import detokenize
from .pipeline import Assets
from .trainer import DevSet, TrainConfig, rng_for


class OracleError(Exception):
    pass


class RunAborted(Exception):
    """Interactive run stopped before the batch was fully labeled; the journal
    holds everything needed to resume."""


@dataclass
class ALConfig:
    strategy: str = "least_confidence"
    query_size: int = 10000
    budget: int = 20
    pool_sample_fraction: float = 0.06
    fine_tune_epochs: int = 2
    oracle: str = "simulated"          # or "interactive"
    beam: int = 5
    n_best: int = 2
    seed: int = 1
    normalized_scores: bool = True
    retrain_full: bool = False

    def __post_init__(self):
        if not 0.0 < self.pool_sample_fraction <= 1.0:
            raise ValueError("pool_sample_fraction must be in (0, 1]")
        if self.query_size < 1 or self.budget < 1:
            raise ValueError("query_size and budget must be >= 1")
        if self.strategy not in acq.STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.oracle not in ("simulated", "interactive"):
            raise ValueError(f"oracle must be simulated or interactive, got {self.oracle!r}")


@dataclass
class IterationRecord:
    iteration: int
    selected: list[int]
    dev_ppl: float
    dev_bleu: float
    checkpoint: str


@dataclass
class ALState:
    iteration: int = 0                      # completed iterations
    labeled_from_pool: dict[int, str] = field(default_factory=dict)   # id -> target text
    pool_remaining: list[int] = field(default_factory=list)
    history: list[IterationRecord] = field(default_factory=list)
    # labels/skips journaled by an interrupted, not-yet-completed iteration;
    # its ids are still in pool_remaining so resumed sampling matches an
    # uninterrupted run
    partial_labels: dict[int, str] = field(default_factory=dict)
    partial_skips: set[int] = field(default_factory=set)
    # event names the interrupted iteration already journaled, so redoing it
    # does not append duplicates
    inflight_journaled: set[str] = field(default_factory=set)


@dataclass
class OracleRequest:
    iteration: int
    items: list[tuple[int, str]]            # (sentence id, source text)


@dataclass
class OracleResponse:
    items: list[tuple[int, str]]            # (sentence id, target text)
    annotator: str
    skipped: list[int] = field(default_factory=list)


class SimulatedOracle:
    """Reveals the pool's withheld references; never skips."""

    def __init__(self, pool: MonolingualPool):
        self._refs = {e.id: e.hidden_reference for e in pool.entries}

    def label(self, request: OracleRequest) -> OracleResponse:
        out = []
        for sid, _source in request.items:
            ref = self._refs.get(sid)
            if ref is None:
                raise OracleError(f"pool sentence {sid} has no hidden reference")
            out.append((sid, ref))
        return OracleResponse(out, annotator="simulated")


# ---------------------------------------------------------------------------
# annotation queue (interactive oracle)

@dataclass
class Candidate:
    sentence_id: int
    source_text: str
    hypothesis: str
    score: float


@dataclass
class AnnotationTask:
    lease_id: str
    sentence_id: int
    source_text: str
    model_best_hypothesis: str
    score: float
    strategy: str


class StaleLease(Exception):
    pass


class AnnotationQueue:
    """Serves one AL batch to human annotators with per-sentence leases.

    Candidates arrive ranked; the first `target_count` are active. A sentence
    is leased to one annotator at a time; leases expire so abandoned tasks
    are re-served. A skip deactivates the sentence (it returns to the pool)
    and activates the next-ranked replacement.
    """

    def __init__(self, strategy: str = "", lease_seconds: float = 300.0, clock=None):
        self._lock = threading.Lock()
        self._done = threading.Event()
        self.strategy = strategy
        self.lease_seconds = lease_seconds
        self._clock = clock if clock is not None else __import__("time").monotonic
        self._candidates: list[Candidate] = []
        self._active: list[int] = []       # indices into _candidates
        self._next_rank = 0
        self._target = 0
        self._labels: dict[int, tuple[str, str]] = {}   # id -> (target, annotator)
        self._skipped: set[int] = set()
        self._leases: dict[str, tuple[int, float]] = {}   # lease -> (sentence id, expiry)
        self._leased_ids: dict[int, str] = {}
        self.iteration = 0
        self.on_label = None               # callbacks set by the loop for journaling
        self.on_skip = None

    def start_batch(self, iteration: int, candidates: list[Candidate], target: int,
                    prelabeled: dict[int, tuple[str, str]] | None = None,
                    preskipped: set[int] | None = None) -> None:
        with self._lock:
            self.iteration = iteration
            self._candidates = list(candidates)
            self._target = min(target, len(candidates))
            known = {c.sentence_id for c in candidates}
            self._labels = {sid: v for sid, v in (prelabeled or {}).items() if sid in known}
            self._skipped = {sid for sid in (preskipped or set()) if sid in known}
            self._leases.clear()
            self._leased_ids.clear()
            self._active = []
            self._next_rank = 0
            while len(self._active) < self._target and self._next_rank < len(self._candidates):
                self._active.append(self._next_rank)
                self._next_rank += 1
            # replayed skips consume their replacements up front
            pos = 0
            while pos < len(self._active):
                sid = self._candidates[self._active[pos]].sentence_id
                if sid in self._skipped and self._next_rank < len(self._candidates):
                    self._active.append(self._next_rank)
                    self._next_rank += 1
                pos += 1
            self._done.clear()
            self._check_done_locked()

    def _check_done_locked(self):
        needed = [i for i in self._active
                  if self._candidates[i].sentence_id not in self._labels
                  and self._candidates[i].sentence_id not in self._skipped]
        if not needed:
            self._done.set()

    def _expire_locked(self):
        now = self._clock()
        for lease, (sid, expiry) in list(self._leases.items()):
            if expiry <= now:
                del self._leases[lease]
                self._leased_ids.pop(sid, None)

    def next_task(self, annotator: str) -> AnnotationTask | None:
        with self._lock:
            self._expire_locked()
            for i in self._active:
                cand = self._candidates[i]
                sid = cand.sentence_id
                if sid in self._labels or sid in self._skipped or sid in self._leased_ids:
                    continue
                lease = uuid.uuid4().hex
                self._leases[lease] = (sid, self._clock() + self.lease_seconds)
                self._leased_ids[sid] = lease
                return AnnotationTask(lease, sid, cand.source_text, cand.hypothesis,
                                      cand.score, self.strategy)
            return None

    def _release_locked(self, lease_id: str, sentence_id: int):
        self._expire_locked()
        held = self._leases.get(lease_id)
        if held is None or held[0] != sentence_id:
            raise StaleLease(f"lease {lease_id!r} is not valid for sentence {sentence_id}")
        del self._leases[lease_id]
        self._leased_ids.pop(sentence_id, None)

    def submit(self, lease_id: str, sentence_id: int, target_text: str,
               annotator: str = "anonymous") -> None:
        if not target_text or not target_text.strip():
            raise ValueError("target text must be non-empty")
        with self._lock:
            self._release_locked(lease_id, sentence_id)
            self._labels[sentence_id] = (target_text.strip(), annotator)
            callback = self.on_label
            self._check_done_locked()
        if callback:
            callback(sentence_id, target_text.strip(), annotator)

    def skip(self, lease_id: str, sentence_id: int) -> None:
        with self._lock:
            self._release_locked(lease_id, sentence_id)
            self._skipped.add(sentence_id)
            # activate the next-ranked replacement, if any
            if self._next_rank < len(self._candidates):
                self._active.append(self._next_rank)
                self._next_rank += 1
            callback = self.on_skip
            self._check_done_locked()
        if callback:
            callback(sentence_id)

    def counts(self) -> dict:
        with self._lock:
            pending = sum(1 for i in self._active
                          if self._candidates[i].sentence_id not in self._labels
                          and self._candidates[i].sentence_id not in self._skipped)
            return {"iteration": self.iteration, "pending": pending,
                    "labeled": len(self._labels), "skipped": len(self._skipped)}

    def wait_done(self, stop_event: threading.Event | None = None,
                  poll: float = 0.05) -> bool:
        while not self._done.wait(poll):
            if stop_event is not None and stop_event.is_set():
                return False
        return True

    def results(self) -> tuple[list[tuple[int, str, str]], list[int]]:
        with self._lock:
            labeled = [(self._candidates[i].sentence_id, *self._labels[self._candidates[i].sentence_id])
                       for i in self._active
                       if self._candidates[i].sentence_id in self._labels]
            return labeled, sorted(self._skipped)

    def finish_batch(self) -> None:
        """Reset after the loop consumed the results, so status counts do not
        double-report the batch while the next iteration fine-tunes."""
        with self._lock:
            self._candidates = []
            self._active = []
            self._labels = {}
            self._skipped = set()
            self._leases.clear()
            self._leased_ids.clear()


class RunProgress:
    """Thread-safe counters the HTTP service reads while the loop runs."""

    def __init__(self):
        self._lock = threading.Lock()
        self._data = {"iteration": 0, "labeled_base": 0, "pool_base": 0,
                      "strategy": "", "running": False}

    def update(self, **kw) -> None:
        with self._lock:
            self._data.update(kw)

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._data)


class InteractiveOracle:
    """Blocks the loop on the annotation queue until the batch is labeled."""

    def __init__(self, queue: AnnotationQueue, stop_event: threading.Event | None = None):
        self.queue = queue
        self.stop_event = stop_event

    def label_ranked(self, iteration: int, candidates: list[Candidate], target: int,
                     prelabeled=None, preskipped=None) -> tuple[list[tuple[int, str, str]], list[int]]:
        self.queue.start_batch(iteration, candidates, target, prelabeled, preskipped)
        if not self.queue.wait_done(self.stop_event):
            raise RunAborted(f"annotation interrupted in iteration {iteration}")
        results = self.queue.results()
        self.queue.finish_batch()
        return results


# ---------------------------------------------------------------------------
# journal

class Journal:
    """Append-only JSONL event stream; every write is flushed. Appends are
    serialized so concurrent annotator submissions interleave cleanly."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, event: str, **fields) -> None:
        record = {"event": event}
        record.update(fields)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
                f.flush()

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in
                self.path.read_text(encoding="utf-8").splitlines() if line]


def replay_journal(path, pool: MonolingualPool) -> ALState:
    """Rebuild the loop state from the journal alone.

    Labels of completed iterations leave the pool; labels and skips of an
    interrupted iteration are kept aside as partial state so the iteration
    can be redone without re-querying or diverging from an uninterrupted run.
    """
    state = ALState(pool_remaining=sorted(pool.ids()))
    remaining = set(state.pool_remaining)
    eval_by_iter: dict[int, tuple[float, float]] = {}
    ckpt_by_iter: dict[int, str] = {}
    selected_by_iter: dict[int, list[int]] = {}
    inflight_labels: dict[int, str] = {}
    inflight_skips: set[int] = set()
    inflight_events: set[str] = set()
    for rec in Journal(path).read():
        event = rec["event"]
        if event == "run_started":
            continue
        inflight_events.add(event)
        if event == "labeled":
            inflight_labels[rec["id"]] = rec["target"]
        elif event == "skipped":
            inflight_skips.add(rec["id"])
        elif event == "selected":
            selected_by_iter[rec["iteration"]] = rec["ids"]
        elif event == "evaluated":
            eval_by_iter[rec["iteration"]] = (rec["dev_ppl"], rec["dev_bleu"])
        elif event == "fine_tuned":
            ckpt_by_iter[rec["iteration"]] = rec["checkpoint"]
        elif event == "iteration_completed":
            i = rec["iteration"]
            state.iteration = i
            ppl, bleu = eval_by_iter[i]
            state.history.append(IterationRecord(
                i, selected_by_iter.get(i, []), ppl, bleu, ckpt_by_iter.get(i, "")))
            for sid, target in inflight_labels.items():
                state.labeled_from_pool[sid] = target
                remaining.discard(sid)
            inflight_labels = {}
            inflight_skips = set()
            inflight_events = set()
    state.partial_labels = inflight_labels
    state.partial_skips = inflight_skips
    state.inflight_journaled = inflight_events - {"labeled", "skipped"}
    state.pool_remaining = sorted(remaining)
    return state


# ---------------------------------------------------------------------------
# the loop

def _sample_ids(remaining: list[int], fraction: float, minimum: int, rng) -> list[int]:
    k = min(len(remaining), max(minimum, math.ceil(fraction * len(remaining))))
    picked = rng.permutation(len(remaining))[:k]
    return [remaining[i] for i in sorted(picked.tolist())]


def run_al(params: md.ParamSet, config: md.ModelConfig, assets: Assets,
           baseline_examples: list[tuple[list[int], list[int]]],
           pool: MonolingualPool, dev: DevSet, al: ALConfig, tc: TrainConfig,
           run_dir: str | Path | None = None, oracle=None,
           progress: RunProgress | None = None) -> tuple[md.ParamSet, ALState]:
    """Iterate sample -> score -> select -> label -> grow -> fine-tune until
    the budget or the pool is exhausted. Resumes from an existing journal in
    run_dir when one is present."""
    entries = {e.id: e for e in pool.entries}
    journal = None
    state = ALState(pool_remaining=sorted(entries.keys()))
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "scores").mkdir(parents=True, exist_ok=True)
        journal = Journal(run_dir / "journal.jsonl")
        existing = journal.read()
        if existing:
            state = replay_journal(journal.path, pool)
            if state.history:
                ckpt = run_dir / state.history[-1].checkpoint
                params, config = md.load_checkpoint(ckpt)
        else:
            journal.append("run_started", seed=al.seed, strategy=al.strategy,
                           query_size=al.query_size, budget=al.budget,
                           pool_size=len(pool), labeled_size=len(baseline_examples),
                           normalized_scores=al.normalized_scores,
                           fine_tune_epochs=al.fine_tune_epochs, beam=al.beam)

    labeled_examples = list(baseline_examples)
    # journal order = acquisition order; keeping it makes resumed fine-tuning
    # batch exactly like an uninterrupted run
    for sid, target in state.labeled_from_pool.items():
        labeled_examples.append(assets.encode_pair(entries[sid].source, target))
    # labels/skips journaled by an interrupted iteration: reuse, don't re-journal
    partial_labels = dict(state.partial_labels)
    partial_skips = set(state.partial_skips)
    inflight_done = set(state.inflight_journaled)
    resumed_iteration = state.iteration + 1

    def journal_event(event, **fields):
        if journal is None:
            return
        if fields.get("iteration") == resumed_iteration and event in inflight_done:
            return   # redoing an interrupted iteration: this event already exists
        journal.append(event, **fields)

    interactive = al.oracle == "interactive"
    if oracle is None:
        if interactive:
            raise ValueError("interactive mode needs an oracle bound to an annotation queue")
        oracle = SimulatedOracle(pool)

    if progress is not None:
        progress.update(strategy=al.strategy, running=True,
                        iteration=state.iteration,
                        labeled_base=len(labeled_examples),
                        pool_base=len(state.pool_remaining))

    iteration = state.iteration
    while iteration < al.budget and state.pool_remaining:
        iteration += 1
        remaining = state.pool_remaining
        if progress is not None:
            progress.update(iteration=iteration, labeled_base=len(labeled_examples),
                            pool_base=len(remaining))
        journal_event("iteration_started", iteration=iteration, pool_size=len(remaining))
        sample_rng = rng_for(al.seed, "pool-sample", iteration)
        sampled = _sample_ids(remaining, al.pool_sample_fraction, al.query_size, sample_rng)
        journal_event("sampled", iteration=iteration, ids=sampled)

        translator = Translator(params, config)
        pool_sample = [(sid, assets.encode_source(entries[sid].source)) for sid in sampled]
        scores = acq.score_pool(pool_sample, translator, al.strategy, al.beam, al.n_best,
                                rng=rng_for(al.seed, "random-strategy", iteration),
                                iteration=iteration, normalized=al.normalized_scores)
        ranked = acq.ranked_ids(scores)
        selected = acq.select_top(scores, al.query_size)
        value_by_id = {s.sentence_id: s.value for s in scores.scores}
        journal_event("selected", iteration=iteration, ids=selected,
                      values=[value_by_id[sid] for sid in selected])
        if run_dir is not None:
            _dump_scores(run_dir / "scores" / f"iter_{iteration:03d}.tsv",
                         iteration, scores, set(selected))

        # pull labels from the oracle; skipped sentences fall back to the
        # next-ranked candidates (interactive mode only; simulation never skips)
        if interactive:
            reserve = ranked[: min(len(ranked), 2 * al.query_size)]
            candidates = _decorate_candidates(reserve, entries, assets, translator,
                                              value_by_id, al)
            # journal every submission/skip the moment it happens, so a crash
            # mid-batch loses nothing
            current_iteration = iteration
            oracle.queue.on_label = lambda sid, target, annotator: journal_event(
                "labeled", iteration=current_iteration, id=sid, target=target,
                annotator=annotator)
            oracle.queue.on_skip = lambda sid: journal_event(
                "skipped", iteration=current_iteration, id=sid)
            labeled, skipped = oracle.label_ranked(
                iteration, candidates, min(al.query_size, len(candidates)),
                prelabeled={sid: (t, "journal") for sid, t in partial_labels.items()},
                preskipped=partial_skips)
        else:
            request = OracleRequest(iteration, [(sid, entries[sid].source) for sid in selected])
            response = oracle.label(request)
            if [sid for sid, _ in response.items] != [sid for sid, _ in request.items]:
                raise OracleError("oracle response ids do not match the request")
            labeled = [(sid, text, response.annotator) for sid, text in response.items]
            skipped = []

        for sid, target, annotator in labeled:
            if not interactive and sid not in partial_labels:
                journal_event("labeled", iteration=iteration, id=sid, target=target,
                              annotator=annotator)
            state.labeled_from_pool[sid] = target
            labeled_examples.append(assets.encode_pair(entries[sid].source, target))
        partial_labels = {}
        partial_skips = set()
        labeled_ids = {sid for sid, _, _ in labeled}
        state.pool_remaining = [sid for sid in remaining if sid not in labeled_ids]
        if progress is not None:
            progress.update(labeled_base=len(labeled_examples),
                            pool_base=len(state.pool_remaining))

        if al.retrain_full:
            params = md.init_params(config, seed=al.seed)
            params = tr.fine_tune(params, config, labeled_examples, tc,
                                  epochs=tc.epochs, seed_tags=("retrain", iteration))
        else:
            params = tr.fine_tune(params, config, labeled_examples, tc,
                                  epochs=al.fine_tune_epochs, seed_tags=("al", iteration))

        ckpt_rel = f"checkpoints/al_iter_{iteration:03d}.bin"
        if run_dir is not None:
            md.save_checkpoint(params, config, run_dir / ckpt_rel)
        journal_event("fine_tuned", iteration=iteration, checkpoint=ckpt_rel)
        ppl, bleu = tr.evaluate(params, config, dev)
        journal_event("evaluated", iteration=iteration, dev_ppl=ppl, dev_bleu=bleu)
        state.iteration = iteration
        state.history.append(IterationRecord(iteration, [sid for sid, _, _ in labeled],
                                             ppl, bleu, ckpt_rel))
        journal_event("iteration_completed", iteration=iteration,
                      labeled_total=len(labeled_examples),
                      pool_remaining=len(state.pool_remaining))

    if progress is not None:
        progress.update(running=False, iteration=state.iteration,
                        labeled_base=len(labeled_examples),
                        pool_base=len(state.pool_remaining))
    return params, state


def _decorate_candidates(ids, entries, assets: Assets, translator: Translator,
                         value_by_id, al: ALConfig) -> list[Candidate]:
    out = []
    for sid in ids:
        source = entries[sid].source
        nbest = translator.beam(assets.encode_source(source), beam=al.beam,
                                n_best=1, source_id=sid)
        hyp = detokenize(assets.trg_vocab.tokens(nbest.best().surface_ids()))
        out.append(Candidate(sid, source, hyp, value_by_id[sid]))
    return out


def _dump_scores(path, iteration, scores: acq.PoolScores, selected: set[int]) -> None:
    lines = ["iteration\tid\tstrategy\tvalue\tselected"]
    for s in sorted(scores.scores, key=lambda s: s.sentence_id):
        lines.append(f"{iteration}\t{s.sentence_id}\t{s.strategy}\t{s.value!r}\t"
                     f"{int(s.sentence_id in selected)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
