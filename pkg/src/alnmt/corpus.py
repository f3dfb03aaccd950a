"""Parallel-corpus ingestion, cleaning, splitting, and the labeled/pool partition.

All functions are pure over immutable inputs: corpora are tuples of frozen
pairs and every shuffle is driven by an explicit seed.
"""

from __future__ import annotations

import math
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Named script sets for the foreign-character filter. Values are frozensets of
# allowed codepoint ranges (inclusive); None disables the filter entirely.
SCRIPT_SETS = {
    "any": None,
    "ascii": ((0x20, 0x7E),),
    "latin": ((0x20, 0x7E), (0xA0, 0x17F)),
    "devanagari+latin": ((0x20, 0x7E), (0x0900, 0x097F), (0x200C, 0x200D), (0x2010, 0x2015)),
}


class CorpusError(Exception):
    """Configuration or consistency error in corpus handling."""


@dataclass(frozen=True)
class SentencePair:
    id: int
    source: str
    target: str


@dataclass(frozen=True)
class PoolEntry:
    id: int
    source: str
    hidden_reference: str | None = None


@dataclass
class ParallelCorpus:
    pairs: list[SentencePair]
    split_tag: str = "train"

    def __len__(self):
        return len(self.pairs)

    def sources(self) -> list[str]:
        return [p.source for p in self.pairs]

    def targets(self) -> list[str]:
        return [p.target for p in self.pairs]


@dataclass
class MonolingualPool:
    """Unlabeled source sentences; hidden references back the simulated oracle.

    Scoring code must only ever see `sources()`: the hidden side is read
    exclusively by the oracle.
    """

    entries: list[PoolEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def ids(self) -> list[int]:
        return [e.id for e in self.entries]

    def sources(self) -> list[tuple[int, str]]:
        return [(e.id, e.source) for e in self.entries]


@dataclass(frozen=True)
class CleanResult:
    text: str | None
    reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.text is not None


def clean(raw: str, script: str | tuple | None = "any") -> CleanResult:
    """Normalize one line: lowercase, strip control characters, squeeze spaces.

    Lines containing characters outside the allowed script ranges are rejected
    with reason "foreign-script"; lines that end up empty with reason "empty".
    Idempotent on accepted lines.
    """
    ranges = SCRIPT_SETS[script] if isinstance(script, str) else script
    text = "".join(" " if ch in "\t\r\n" else ch for ch in raw)
    text = "".join(ch for ch in text if not unicodedata.category(ch).startswith("C"))
    text = " ".join(text.split())
    text = text.lower()
    if not text:
        return CleanResult(None, "empty")
    if ranges is not None:
        for ch in text:
            cp = ord(ch)
            if not any(lo <= cp <= hi for lo, hi in ranges):
                return CleanResult(None, "foreign-script")
    return CleanResult(text)


def ingest(source_lines, target_lines, script_src="any", script_trg="any"):
    """Pair up aligned lines, clean both sides, drop rejects and duplicates.

    Ids are assigned in ingestion order, before any shuffling, so they stay
    stable across runs. Returns (corpus, stats dict).
    """
    src = list(source_lines)
    trg = list(target_lines)
    if len(src) != len(trg):
        raise CorpusError(f"unaligned corpus files: {len(src)} source lines vs {len(trg)} target lines")
    pairs = []
    seen = set()
    stats = {"total": len(src), "rejected_src": 0, "rejected_trg": 0, "duplicates": 0}
    next_id = 0
    for s_raw, t_raw in zip(src, trg):
        s = clean(s_raw, script_src)
        if not s.ok:
            stats["rejected_src"] += 1
            continue
        t = clean(t_raw, script_trg)
        if not t.ok:
            stats["rejected_trg"] += 1
            continue
        key = (s.text, t.text)
        if key in seen:
            stats["duplicates"] += 1
            continue
        seen.add(key)
        pairs.append(SentencePair(next_id, s.text, t.text))
        next_id += 1
    stats["kept"] = len(pairs)
    return ParallelCorpus(pairs, "train"), stats


def split(corpus: ParallelCorpus, dev_size: int, test_size: int, seed: int):
    """Shuffle deterministically and carve exact dev/test sets off the corpus.

    Pairs sharing a source sentence always land in the same split, so the
    splits stay disjoint on source text, not just on whole pairs.
    """
    n = len(corpus)
    if dev_size + test_size >= n:
        raise CorpusError(f"dev+test ({dev_size}+{test_size}) must be smaller than the corpus ({n})")
    groups: dict[str, list[SentencePair]] = {}
    order: list[str] = []
    for p in corpus.pairs:
        if p.source not in groups:
            groups[p.source] = []
            order.append(p.source)
        groups[p.source].append(p)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(order))
    shuffled = [order[i] for i in perm]

    dev: list[SentencePair] = []
    test: list[SentencePair] = []
    train: list[SentencePair] = []
    for src_text in shuffled:
        g = groups[src_text]
        if len(dev) + len(g) <= dev_size:
            dev.extend(g)
        elif len(test) + len(g) <= test_size:
            test.extend(g)
        else:
            train.extend(g)
    if len(dev) != dev_size or len(test) != test_size:
        raise CorpusError(
            f"could not hit exact split sizes (got dev={len(dev)}, test={len(test)}); "
            "too many pairs share a source sentence")
    return (ParallelCorpus(train, "train"),
            ParallelCorpus(dev, "dev"),
            ParallelCorpus(test, "test"))


def baseline_size(n: int, fraction: float) -> int:
    return math.ceil(fraction * n)


def partition_for_al(train: ParallelCorpus, baseline_fraction: float, seed: int):
    """Split the train set into a labeled baseline and an unlabeled pool.

    The pool keeps the withheld targets as hidden references for the
    simulated oracle. Baseline size is ceil(fraction * n).
    """
    if not 0.0 < baseline_fraction < 1.0:
        raise CorpusError(f"baseline_fraction must be in (0, 1), got {baseline_fraction}")
    n = len(train)
    n_base = baseline_size(n, baseline_fraction)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    base_idx = set(perm[:n_base].tolist())
    baseline = [p for i, p in enumerate(train.pairs) if i in base_idx]
    pool = [PoolEntry(p.id, p.source, p.target)
            for i, p in enumerate(train.pairs) if i not in base_idx]
    return ParallelCorpus(baseline, "train"), MonolingualPool(pool)


def write_split_files(prefix: str | Path, train, dev, test) -> list[Path]:
    """Write `<prefix>.{train,dev,test}.{src,trg}`, one sentence per line."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for tag, corpus in (("train", train), ("dev", dev), ("test", test)):
        for side, lines in (("src", corpus.sources()), ("trg", corpus.targets())):
            path = prefix.with_name(f"{prefix.name}.{tag}.{side}")
            path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
            written.append(path)
    return written


def read_parallel_files(src_path, trg_path) -> ParallelCorpus:
    """Read two aligned one-sentence-per-line files as an already-clean corpus."""
    src = Path(src_path).read_text(encoding="utf-8").splitlines()
    trg = Path(trg_path).read_text(encoding="utf-8").splitlines()
    if len(src) != len(trg):
        raise CorpusError(f"unaligned files {src_path} / {trg_path}")
    pairs = [SentencePair(i, s, t) for i, (s, t) in enumerate(zip(src, trg))]
    return ParallelCorpus(pairs)
