"""Uncertainty scoring of pool sentences and top-B selection.

Sequence probabilities are length-normalized (geometric mean of the token
probabilities) by default: the raw product shrinks toward zero with length,
which saturates least-confidence at 1 for every long sentence. Raw-product
scoring stays available behind `normalized=False` for comparison; every run
header records which mode was used.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

from .decoding import Hypothesis, NBestList

log = logging.getLogger(__name__)

STRATEGIES = ("least_confidence", "margin", "random")


@dataclass(frozen=True)
class AcquisitionScore:
    sentence_id: int
    strategy: str
    value: float   # higher = more worth labeling


@dataclass
class PoolScores:
    iteration: int
    strategy: str
    scores: list[AcquisitionScore] = field(default_factory=list)
    selected: list[int] = field(default_factory=list)   # X_B, ranked


def _sequence_probability(hyp: Hypothesis, normalized: bool) -> float:
    if normalized:
        return math.exp(hyp.score)
    return math.exp(sum(hyp.token_logprobs))


def least_confidence(nbest: NBestList, normalized: bool = True) -> AcquisitionScore:
    """1 minus the probability of the model's best hypothesis."""
    if not nbest.hypotheses:
        raise ValueError("empty N-best list")
    p_best = _sequence_probability(nbest.best(), normalized)
    return AcquisitionScore(nbest.source_id, "least_confidence", 1.0 - p_best)


def margin(nbest: NBestList, normalized: bool = True) -> AcquisitionScore:
    """Negated gap between the two most probable hypotheses; 0 means the model
    cannot separate them. With a single hypothesis the sentence is treated as
    maximally confident (sentinel -1)."""
    if not nbest.hypotheses:
        raise ValueError("empty N-best list")
    if len(nbest.hypotheses) < 2:
        return AcquisitionScore(nbest.source_id, "margin", -1.0)
    p1 = _sequence_probability(nbest.hypotheses[0], normalized)
    p2 = _sequence_probability(nbest.hypotheses[1], normalized)
    return AcquisitionScore(nbest.source_id, "margin", -(p1 - p2))


def score_pool(pool_sample: list[tuple[int, list[int]]], translator, strategy: str,
               beam: int = 5, n_best: int = 2, rng=None, iteration: int = 0,
               normalized: bool = True) -> PoolScores:
    """Score every sampled sentence with the given strategy.

    Uncertainty strategies decode each sentence (n_best >= 2 so margin always
    has two hypotheses); the random control draws seeded uniforms and skips
    decoding. A sentence whose decode raises is given -inf (never selected)
    and logged.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    out = PoolScores(iteration, strategy)
    if strategy == "random":
        if rng is None:
            raise ValueError("random strategy needs an rng")
        for sid, _ in pool_sample:
            out.scores.append(AcquisitionScore(sid, strategy, float(rng.random())))
        return out
    scorer = least_confidence if strategy == "least_confidence" else margin
    for sid, ids in pool_sample:
        try:
            nbest = translator.beam(ids, beam=beam, n_best=max(n_best, 2), source_id=sid)
            out.scores.append(scorer(nbest, normalized))
        except Exception:
            log.warning("decode failed for pool sentence %d; excluding it", sid, exc_info=True)
            out.scores.append(AcquisitionScore(sid, strategy, -math.inf))
    return out


def select_top(scores: PoolScores, budget: int) -> list[int]:
    """The `budget` highest-value sentence ids, ties broken by ascending id.

    Asking for more than available selects everything and logs the shortfall.
    Fills scores.selected and returns it (ranked)."""
    if budget > len(scores.scores):
        log.warning("query size %d exceeds %d scored sentences; selecting all",
                    budget, len(scores.scores))
        budget = len(scores.scores)
    ranked = sorted(scores.scores, key=lambda s: (-s.value, s.sentence_id))
    scores.selected = [s.sentence_id for s in ranked[:budget]]
    return scores.selected


def ranked_ids(scores: PoolScores) -> list[int]:
    """All scored ids in selection order (used for skip replacements)."""
    return [s.sentence_id for s in sorted(scores.scores, key=lambda s: (-s.value, s.sentence_id))]
