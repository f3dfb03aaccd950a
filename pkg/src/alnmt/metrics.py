"""Corpus BLEU with brevity penalty, and perplexity.

BLEU is computed over whitespace tokens of detokenized text (subwords are
joined before scoring); a single reference per candidate is the default,
multi-reference clipping is supported but unused by the pipeline.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from . import model as md
from .bpe import PAD


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    weights: list[float]
    brevity_penalty: float
    candidate_length: int
    reference_length: int

    @property
    def percent(self) -> float:
        return 100.0 * self.bleu


@dataclass
class PerplexityReport:
    cross_entropy_bits: float
    perplexity: float
    token_count: int


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates: list[list[str]], references, n_max: int = 4,
                weights: list[float] | None = None, smooth: bool = False) -> BleuReport:
    """Corpus-level BLEU: clipped n-gram counts are summed over the whole
    corpus, the geometric mean of the precisions is damped by the brevity
    penalty. `references` holds one reference per candidate, or a list of
    references per candidate (clipping then takes the per-gram max).

    With smooth=True, zero counts for n >= 2 get add-one smoothing (tiny dev
    sets); otherwise any zero precision makes the score 0.
    """
    if len(candidates) == 0 or len(candidates) != len(references):
        raise ValueError(f"need equally many candidates and references, got "
                         f"{len(candidates)} vs {len(references)}")
    if weights is None:
        weights = [1.0 / n_max] * n_max
    if len(weights) != n_max or abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError("weights must have n_max entries summing to 1")

    clipped = [0] * n_max
    total = [0] * n_max
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        if refs and isinstance(refs[0], str):
            refs = [refs]
        cand_len += len(cand)
        # best match length: the reference length closest to the candidate's
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, n_max + 1):
            counts = _ngrams(cand, n)
            if not counts:
                continue
            max_ref: Counter = Counter()
            for r in refs:
                for gram, c in _ngrams(r, n).items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            total[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(c, max_ref[gram]) for gram, c in counts.items())

    precisions = []
    for n in range(n_max):
        c, t = clipped[n], total[n]
        if smooth and n >= 1:
            c, t = c + 1, t + 1
        precisions.append(c / t if t > 0 else 0.0)

    if cand_len == 0:
        return BleuReport(0.0, precisions, weights, 0.0, 0, ref_len)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    if any(p == 0.0 for p in precisions):
        bleu = 0.0
    else:
        bleu = bp * math.exp(sum(w * math.log(p) for w, p in zip(weights, precisions)))
    return BleuReport(bleu, precisions, weights, bp, cand_len, ref_len)


def perplexity(params: md.ParamSet, config: md.ModelConfig,
               examples: list[tuple[list[int], list[int]]],
               batch_tokens: int = 2048) -> PerplexityReport:
    """Teacher-forced perplexity of the model on tokenized (src, trg) pairs:
    2 to the per-token cross entropy in bits, pads excluded."""
    if not examples:
        raise ValueError("perplexity needs at least one sentence pair")
    total_logprob = 0.0   # natural log
    total_tokens = 0
    for batch in _batches_by_size(examples, config, batch_tokens):
        with nm.no_grad():
            h_enc = md.encode_batch(batch.src, batch.src_nonpad, params, config)
            logits = md.decode_batch(batch.trg_in, batch.trg_nonpad, h_enc,
                                     batch.src_nonpad, params, config)
        # the cross-entropy sum itself is carried in float64
        wide = logits.data.astype(np.float64)
        logp = nm.log_softmax(nm.Tensor(wide)).data
        gold = np.take_along_axis(logp, batch.trg_out[..., None], axis=-1)[..., 0]
        total_logprob += float(gold[batch.trg_nonpad].sum())
        total_tokens += batch.num_target_tokens
    if total_tokens == 0:
        raise ValueError("no non-pad target tokens to score")
    h_bits = -total_logprob / total_tokens / math.log(2.0)
    return PerplexityReport(h_bits, 2.0 ** h_bits, total_tokens)


def perplexity_from_token_logprobs(logprobs_ln: list[float]) -> PerplexityReport:
    """Perplexity of an explicit list of per-token natural-log probabilities."""
    if not logprobs_ln:
        raise ValueError("no tokens")
    h_bits = -sum(logprobs_ln) / len(logprobs_ln) / math.log(2.0)
    return PerplexityReport(h_bits, 2.0 ** h_bits, len(logprobs_ln))


def _batches_by_size(examples, config, batch_tokens):
    chunk: list = []
    tokens = 0
    for ex in examples:
        cost = len(ex[0]) + len(ex[1]) + 3
        if chunk and tokens + cost > batch_tokens:
            yield md.make_batch(chunk, config)
            chunk, tokens = [], 0
        chunk.append(ex)
        tokens += cost
    if chunk:
        yield md.make_batch(chunk, config)


def format_report(bleu: BleuReport, ppl: PerplexityReport | None) -> str:
    """Fixed-field evaluation report used by the CLI's test mode."""
    lines = [
        f"BLEU%     {bleu.percent:.2f}",
        "p_n       " + " ".join(f"{p:.4f}" for p in bleu.precisions),
        f"BP        {bleu.brevity_penalty:.6f}",
        f"c/r       {bleu.candidate_length}/{bleu.reference_length}",
    ]
    if ppl is not None:
        lines.append(f"PPL       {ppl.perplexity:.4f}")
    return "\n".join(lines)
