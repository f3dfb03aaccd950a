"""Synthetic copy/reverse translation tasks for desk-scale experiments.

Sentences are sequences of single-letter words over a 20-symbol alphabet with
a zipf-like frequency skew, so rare symbols exist for uncertainty sampling to
hunt down. The target is the source copied or word-reversed.
"""

from __future__ import annotations

import numpy as np

from .corpus import ParallelCorpus, SentencePair

ALPHABET = list("abcdefghijklmnopqrst")   # 20 symbols


def symbol_weights() -> np.ndarray:
    w = 1.0 / (np.arange(len(ALPHABET)) + 1.5)
    return w / w.sum()


def toy_pairs(n: int, seed: int, task: str = "reverse",
              min_len: int = 3, max_len: int = 9) -> list[tuple[str, str]]:
    """Generate n unique-source sentence pairs."""
    if task not in ("copy", "reverse"):
        raise ValueError(f"unknown toy task {task!r}")
    rng = np.random.default_rng(seed)
    weights = symbol_weights()
    seen = set()
    pairs = []
    attempts = 0
    while len(pairs) < n:
        attempts += 1
        if attempts > 100 * n:
            raise RuntimeError("cannot generate enough unique toy sentences; "
                               "lower n or raise max_len")
        length = int(rng.integers(min_len, max_len + 1))
        words = list(rng.choice(ALPHABET, size=length, p=weights))
        src = " ".join(words)
        if src in seen:
            continue
        seen.add(src)
        trg = " ".join(reversed(words)) if task == "reverse" else src
        pairs.append((src, trg))
    return pairs


def toy_corpus(n: int, seed: int, task: str = "reverse",
               min_len: int = 3, max_len: int = 9) -> ParallelCorpus:
    pairs = toy_pairs(n, seed, task, min_len, max_len)
    return ParallelCorpus([SentencePair(i, s, t) for i, (s, t) in enumerate(pairs)])
