"""Mini-batch training with warmup + plateau learning-rate scheduling,
perplexity-based early stopping, and best-checkpoint retention."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from . import model as md
from . import numerics as nm
from .bpe import Vocabulary, detokenize
from .decoding import Translator


class TrainingDiverged(Exception):
    pass


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Independent deterministic stream named by (seed, tags); stateless, so
    resumed runs draw exactly what uninterrupted runs draw."""
    entropy = [seed] + [zlib.crc32(str(t).encode("utf-8")) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass
class TrainConfig:
    lr0: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    warmup_steps: int = 1000
    min_lr: float = 1e-8
    plateau_factor: float = 0.7
    plateau_rel_tol: float = 1e-4
    patience: int = 5
    epochs: int = 20
    batch_tokens: int = 512
    validate_every: int = 1000
    keep_best: int = 3
    eps_ls: float = 0.1
    dropout: float = 0.3
    seed: int = 1

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.min_lr >= self.lr0:
            raise ValueError("min_lr must be below lr0")


@dataclass
class TrainState:
    step: int = 0
    plateau_events: int = 0
    best_ppl: float = math.inf
    bad_validations: int = 0
    checkpoints: list[str] = field(default_factory=list)   # newest-best last
    stopped_early: bool = False


@dataclass
class DevSet:
    """Tokenized dev pairs plus the reference surface text for BLEU."""
    examples: list[tuple[list[int], list[int]]]
    reference_texts: list[str]
    trg_vocab: Vocabulary


@dataclass
class TrainResult:
    params: md.ParamSet
    state: TrainState
    log: list[dict]
    best_checkpoint: str | None


def lr_schedule(t: int, tc: TrainConfig, plateau_events: int) -> float:
    """Linear warmup to lr0 over warmup_steps, then lr0 damped by
    plateau_factor per plateau event, floored at min_lr."""
    if t < 1:
        raise ValueError("step counter starts at 1")
    base = tc.lr0 * min(1.0, t / tc.warmup_steps)
    return max(tc.min_lr, base * tc.plateau_factor ** plateau_events)


def length_bucketed_batches(examples, batch_tokens: int, rng, window: int = 256):
    """Shuffle, then length-sort inside windows and pack batches under the
    token budget; batch order is reshuffled. Deterministic given the rng."""
    n = len(examples)
    order = rng.permutation(n)
    arranged = []
    for start in range(0, n, window):
        chunk = order[start:start + window].tolist()
        chunk.sort(key=lambda i: (len(examples[i][0]) + len(examples[i][1]), i))
        arranged.extend(chunk)
    batches = []
    current: list[int] = []
    tokens = 0
    for i in arranged:
        cost = len(examples[i][0]) + len(examples[i][1]) + 3
        if current and tokens + cost > batch_tokens:
            batches.append(current)
            current, tokens = [], 0
        current.append(i)
        tokens += cost
    if current:
        batches.append(current)
    rng.shuffle(batches)
    return [[examples[i] for i in batch] for batch in batches]


def evaluate(params: md.ParamSet, config: md.ModelConfig, dev: DevSet) -> tuple[float, float]:
    """Dev perplexity (teacher-forced) and dev BLEU (greedy decode), both in
    eval mode; never mutates parameters."""
    ppl = metrics.perplexity(params, config, dev.examples).perplexity
    translator = Translator(params, config)
    hyps = translator.greedy_batch([src for src, _ in dev.examples])
    cands = [detokenize(dev.trg_vocab.tokens(h.surface_ids())).split() for h in hyps]
    refs = [r.split() for r in dev.reference_texts]
    bleu = metrics.corpus_bleu(cands, refs).bleu
    return ppl, bleu


def _dump_diagnostics(run_dir, state, lr, loss_value, params):
    if run_dir is None:
        return
    path = Path(run_dir) / "diagnostics.json"
    norms = {name: float(np.linalg.norm(t.data)) for name, t in params.items()}
    path.write_text(json.dumps({
        "step": state.step, "lr": lr, "loss": repr(loss_value), "param_norms": norms,
    }, indent=2))


def train(params: md.ParamSet, config: md.ModelConfig,
          train_examples: list[tuple[list[int], list[int]]], dev: DevSet,
          tc: TrainConfig, run_dir: str | Path | None = None,
          log_label: str = "train") -> TrainResult:
    """Optimize until the epoch budget ends or patience runs out at the
    minimum learning rate. Every new best dev perplexity saves a checkpoint
    (the newest keep_best survive); the returned parameters are the best
    checkpoint's."""
    config.dropout = tc.dropout
    state = TrainState()
    adam_state = None
    log_entries: list[dict] = []
    log_path = None
    ckpt_dir = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / f"{log_label}.log.jsonl"
        log_path.write_text("")
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
    dropout_rng = rng_for(tc.seed, "dropout")
    loss_since_validation: list[float] = []
    stop = False

    def validate() -> None:
        nonlocal adam_state
        ppl, bleu = evaluate(params, config, dev)
        entry = {
            "step": state.step,
            "train_loss": float(np.mean(loss_since_validation)) if loss_since_validation else None,
            "lr": lr_schedule(max(state.step, 1), tc, state.plateau_events),
            "dev_ppl": ppl,
            "dev_bleu": bleu,
        }
        log_entries.append(entry)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
        loss_since_validation.clear()
        if ppl < state.best_ppl * (1.0 - tc.plateau_rel_tol):
            state.best_ppl = ppl
            state.bad_validations = 0
            if ckpt_dir is not None:
                path = ckpt_dir / f"ckpt_{state.step:07d}.bin"
                md.save_checkpoint(params, config, path)
                state.checkpoints.append(str(path))
                while len(state.checkpoints) > tc.keep_best:
                    old = Path(state.checkpoints.pop(0))
                    old.unlink(missing_ok=True)
        else:
            state.bad_validations += 1
            if state.bad_validations >= tc.patience:
                state.bad_validations = 0
                current = lr_schedule(max(state.step, 1), tc, state.plateau_events)
                if current <= tc.min_lr:
                    state.stopped_early = True
                else:
                    state.plateau_events += 1

    for epoch in range(tc.epochs):
        if stop:
            break
        batch_rng = rng_for(tc.seed, "batches", epoch)
        for examples in length_bucketed_batches(train_examples, tc.batch_tokens, batch_rng):
            state.step += 1
            lr = lr_schedule(state.step, tc, state.plateau_events)
            batch = md.make_batch(examples, config)
            loss, _ = md.sequence_loss(batch, params, config, tc.eps_ls,
                                       training=True, rng=dropout_rng)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                _dump_diagnostics(run_dir, state, lr, loss_value, params)
                raise TrainingDiverged(f"non-finite loss {loss_value!r} at step {state.step}")
            loss.backward()
            adam_state = nm.adam_step(params.arrays(), params.grads(), adam_state,
                                      state.step, lr, tc.beta1, tc.beta2, tc.adam_eps)
            params.zero_grad()
            loss_since_validation.append(loss_value)
            if state.step % tc.validate_every == 0:
                validate()
                if state.stopped_early:
                    stop = True
                    break

    if loss_since_validation or not log_entries:
        validate()

    best_checkpoint = state.checkpoints[-1] if state.checkpoints else None
    best_params = params
    if best_checkpoint is not None:
        best_params, _ = md.load_checkpoint(best_checkpoint)
    return TrainResult(best_params, state, log_entries, best_checkpoint)


def fine_tune(params: md.ParamSet, config: md.ModelConfig,
              examples: list[tuple[list[int], list[int]]], tc: TrainConfig,
              epochs: int = 2, seed_tags: tuple = ()) -> md.ParamSet:
    """Continue optimization on the given labeled set for a fixed number of
    epochs; optimizer moments start fresh. Zero epochs or an empty set leaves
    the parameters untouched."""
    if epochs <= 0 or not examples:
        return params
    config.dropout = tc.dropout
    adam_state = None
    dropout_rng = rng_for(tc.seed, "finetune-dropout", *seed_tags)
    step = 0
    for epoch in range(epochs):
        batch_rng = rng_for(tc.seed, "finetune-batches", *seed_tags, epoch)
        for batch_examples in length_bucketed_batches(examples, tc.batch_tokens, batch_rng):
            step += 1
            lr = tc.lr0   # no warmup: short continuation runs at full rate
            batch = md.make_batch(batch_examples, config)
            loss, _ = md.sequence_loss(batch, params, config, tc.eps_ls,
                                       training=True, rng=dropout_rng)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite loss in fine-tune step {step}")
            loss.backward()
            adam_state = nm.adam_step(params.arrays(), params.grads(), adam_state,
                                      step, lr, tc.beta1, tc.beta2, tc.adam_eps)
            params.zero_grad()
    return params
