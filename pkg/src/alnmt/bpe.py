"""Byte-pair encoding: learn merges, apply them, and build vocabularies.

Subwords carry an "@@" suffix on every non-final piece of a word, so
detokenization is a plain join that drops "@@ " boundaries. Merges are
applied in the order they were learned.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

MARKER = "@@"

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ["<pad>", "<unk>", "<s>", "</s>"]


@dataclass
class BpeModel:
    merges: list[tuple[str, str]] = field(default_factory=list)

    @property
    def merge_count(self) -> int:
        return len(self.merges)


def _word_symbols(word: str) -> tuple[str, ...]:
    """Split a word into characters, marking all but the last as continuations."""
    if len(word) == 1:
        return (word,)
    return tuple(c + MARKER for c in word[:-1]) + (word[-1],)


def _merge_symbols(left: str, right: str) -> str:
    assert left.endswith(MARKER)
    return left[: -len(MARKER)] + right


def _pair_counts(word_freqs: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for symbols, freq in word_freqs.items():
        for a, b in zip(symbols, symbols[1:]):
            counts[(a, b)] += freq
    return counts


def _apply_merge_to_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    merged = _merge_symbols(*pair)
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def learn_bpe(sentences, num_merges: int) -> BpeModel:
    """Learn up to num_merges merges by repeatedly joining the most frequent
    adjacent symbol pair. Frequency ties break lexicographically on the pair,
    so the merge list is deterministic. Stops early once no pair repeats.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    word_freqs: dict[tuple[str, ...], int] = {}
    for sent in sentences:
        for word in sent.split():
            sym = _word_symbols(word)
            word_freqs[sym] = word_freqs.get(sym, 0) + 1
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        counts = _pair_counts(word_freqs)
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        pair, freq = best
        if freq < 2:
            break
        merges.append(pair)
        new_freqs: dict[tuple[str, ...], int] = {}
        for symbols, f in word_freqs.items():
            if pair[0] in symbols:
                symbols = _apply_merge_to_word(symbols, pair)
            new_freqs[symbols] = new_freqs.get(symbols, 0) + f
        word_freqs = new_freqs
    return BpeModel(merges)


def apply_bpe(model: BpeModel, sentence: str, _cache: dict | None = None) -> list[str]:
    """Segment a sentence into subword tokens, applying merges in learned order.

    Unseen characters simply stay as singleton symbols.
    """
    tokens: list[str] = []
    for word in sentence.split():
        if _cache is not None and word in _cache:
            tokens.extend(_cache[word])
            continue
        symbols = _word_symbols(word)
        for pair in model.merges:
            if len(symbols) == 1:
                break
            if pair[0] in symbols:
                symbols = _apply_merge_to_word(symbols, pair)
        if _cache is not None:
            _cache[word] = list(symbols)
        tokens.extend(symbols)
    return tokens


def detokenize(tokens: list[str]) -> str:
    """Inverse of apply_bpe on in-vocabulary text: join and drop continuations."""
    return " ".join(tokens).replace(MARKER + " ", "")


class Segmenter:
    """apply_bpe with a per-model word cache (application is pure, cache is
    an implementation detail)."""

    def __init__(self, model: BpeModel):
        self.model = model
        self._cache: dict[str, list[str]] = {}

    def __call__(self, sentence: str) -> list[str]:
        return apply_bpe(self.model, sentence, self._cache)


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: list[str]

    def __len__(self):
        return len(self.id_to_token)

    @classmethod
    def build(cls, token_sequences) -> "Vocabulary":
        """Collect every token of the (training-split) sequences after the
        four reserved specials; first occurrence order."""
        id_to_token = list(SPECIALS)
        token_to_id = {t: i for i, t in enumerate(id_to_token)}
        for seq in token_sequences:
            for tok in seq:
                if tok not in token_to_id:
                    token_to_id[tok] = len(id_to_token)
                    id_to_token.append(tok)
        return cls(token_to_id, id_to_token)

    def ids(self, tokens: list[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def tokens(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]


def save_merges(model: BpeModel, path) -> None:
    """One merge per line, "left right", line order = application order."""
    lines = [f"{a} {b}" for a, b in model.merges]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_merges(path) -> BpeModel:
    merges = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        a, b = line.split(" ")
        merges.append((a, b))
    return BpeModel(merges)


def save_vocab(vocab: Vocabulary, path) -> None:
    """One token per line; line number = id - number of specials."""
    lines = vocab.id_to_token[len(SPECIALS):]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_vocab(path) -> Vocabulary:
    id_to_token = list(SPECIALS)
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            id_to_token.append(line)
    return Vocabulary({t: i for i, t in enumerate(id_to_token)}, id_to_token)
