"""Greedy and beam-search decoding with per-token log-probabilities.

Decoders work against a step function mapping a batch of bos-prefixed
target prefixes to next-token natural-log probabilities, so the search is
testable against scripted distributions and reusable by pool scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as md
from . import numerics as nm
from .bpe import BOS, EOS, detokenize


@dataclass
class Hypothesis:
    tokens: list[int]                 # generated ids, ending in eos unless cut
    token_logprobs: list[float]       # natural log, one per token

    @property
    def score(self) -> float:
        """Length-normalized log-probability."""
        return sum(self.token_logprobs) / len(self.tokens)

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS

    def surface_ids(self) -> list[int]:
        return self.tokens[:-1] if self.finished else list(self.tokens)


@dataclass
class NBestList:
    source_id: int
    hypotheses: list[Hypothesis] = field(default_factory=list)

    def best(self) -> Hypothesis:
        return self.hypotheses[0]


def greedy_decode(step_fn, max_len: int) -> Hypothesis:
    """Argmax decoding; ties go to the lowest token id."""
    prefix = [BOS]
    tokens: list[int] = []
    logprobs: list[float] = []
    while len(tokens) < max_len:
        lp = step_fn(np.asarray([prefix], dtype=np.int64))[0]
        tok = int(np.argmax(lp))
        tokens.append(tok)
        logprobs.append(float(lp[tok]))
        if tok == EOS:
            break
        prefix.append(tok)
    return Hypothesis(tokens, logprobs)


def beam_decode(step_fn, beam: int, n_best: int, max_len: int) -> list[Hypothesis]:
    """Beam search over cumulative log-probability.

    Hypotheses that emit eos are frozen; expansion continues until `beam`
    hypotheses finished, the live set emptied, or max_len steps. The returned
    list is ranked by length-normalized score, finished hypotheses first,
    padded with unfinished ones cut at max_len when fewer than n_best finish.
    """
    if not 1 <= n_best <= beam:
        raise ValueError(f"need 1 <= n_best <= beam, got n_best={n_best}, beam={beam}")
    live: list[tuple[list[int], float, list[float]]] = [([], 0.0, [])]
    finished: list[tuple[list[int], float, list[float]]] = []
    for _ in range(max_len):
        prefixes = np.asarray([[BOS] + toks for toks, _, _ in live], dtype=np.int64)
        lps = step_fn(prefixes)
        candidates = []
        for i in range(len(live)):
            cum = live[i][1]
            row = lps[i]
            for v in range(row.shape[0]):
                candidates.append((cum + float(row[v]), v, i))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live = []
        for cum, v, i in candidates[:beam]:
            toks, _, lp_list = live[i]
            entry = (toks + [v], cum, lp_list + [float(lps[i][v])])
            if v == EOS:
                finished.append(entry)
            else:
                next_live.append(entry)
        live = next_live
        if not live or len(finished) >= beam:
            break

    def rank(entries):
        hyps = [Hypothesis(toks, lp_list) for toks, _, lp_list in entries]
        hyps.sort(key=lambda h: -h.score)
        return hyps

    ranked = rank(finished) + rank(live)
    return ranked[:n_best]


class ScriptedModel:
    """Step function backed by a table of distributions, for tests and
    acquisition oracles. `table` maps a prefix tuple (without bos) to a
    probability vector; `default` is a list of per-step fallbacks."""

    def __init__(self, vocab_size: int, default: list[np.ndarray],
                 table: dict[tuple, np.ndarray] | None = None):
        self.vocab_size = vocab_size
        self.default = [np.asarray(d, dtype=np.float64) for d in default]
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in (table or {}).items()}

    def __call__(self, prefixes: np.ndarray) -> np.ndarray:
        out = np.empty((prefixes.shape[0], self.vocab_size))
        for i, row in enumerate(prefixes):
            key = tuple(int(x) for x in row[1:])
            dist = self.table.get(key)
            if dist is None:
                step = len(key)
                dist = self.default[min(step, len(self.default) - 1)]
            with np.errstate(divide="ignore"):   # zero-probability entries are fine
                out[i] = np.log(dist)
        return out


class Translator:
    """Decoding facade over a trained parameter set, working on token ids."""

    def __init__(self, params: md.ParamSet, config: md.ModelConfig):
        self.params = params
        self.config = config

    def _encode(self, src_ids: list[int]) -> np.ndarray:
        enc = md.encode_source_ids(src_ids, self.config)
        with nm.no_grad():
            h = md.encode_batch(enc.ids[None, :], None, self.params, self.config)
        return h.data

    def _step_fn(self, h_enc_data: np.ndarray):
        def step(prefixes: np.ndarray) -> np.ndarray:
            b = prefixes.shape[0]
            h = np.broadcast_to(h_enc_data, (b,) + h_enc_data.shape[1:])
            with nm.no_grad():
                logits = md.decode_batch(prefixes, None, nm.Tensor(h), None,
                                         self.params, self.config)
                lp = nm.log_softmax(nm.Tensor(logits.data[:, -1].astype(np.float64)))
            return lp.data
        return step

    def greedy(self, src_ids: list[int]) -> Hypothesis:
        return greedy_decode(self._step_fn(self._encode(src_ids)), self.config.max_length)

    def beam(self, src_ids: list[int], beam: int = 5, n_best: int = 1,
             source_id: int = -1) -> NBestList:
        hyps = beam_decode(self._step_fn(self._encode(src_ids)), beam, n_best,
                           self.config.max_length)
        return NBestList(source_id, hyps)

    def beam_batch(self, sources: list[tuple[int, list[int]]], beam: int = 5,
                   n_best: int = 1) -> list[NBestList]:
        """Per-sentence N-best for a batch of (id, source token ids)."""
        return [self.beam(ids, beam, n_best, source_id=sid) for sid, ids in sources]

    def greedy_batch(self, sources: list[list[int]]) -> list[Hypothesis]:
        """Greedy decode many sentences at once, bucketed by source length so
        padding never enters the computation."""
        results: list[Hypothesis | None] = [None] * len(sources)
        buckets: dict[int, list[int]] = {}
        for i, ids in enumerate(sources):
            buckets.setdefault(md.encode_source_ids(ids, self.config).length, []).append(i)
        for _, idxs in sorted(buckets.items()):
            src = np.stack([md.encode_source_ids(sources[i], self.config).ids for i in idxs])
            with nm.no_grad():
                h_enc = md.encode_batch(src, None, self.params, self.config)
            b = src.shape[0]
            prefixes = np.full((b, 1), BOS, dtype=np.int64)
            toks: list[list[int]] = [[] for _ in range(b)]
            lps: list[list[float]] = [[] for _ in range(b)]
            done = np.zeros(b, dtype=bool)
            for _ in range(self.config.max_length):
                with nm.no_grad():
                    logits = md.decode_batch(prefixes, None, h_enc, None,
                                             self.params, self.config)
                    lp = nm.log_softmax(nm.Tensor(logits.data[:, -1].astype(np.float64))).data
                nxt = lp.argmax(axis=-1)
                for j in range(b):
                    if done[j]:
                        continue
                    toks[j].append(int(nxt[j]))
                    lps[j].append(float(lp[j, nxt[j]]))
                    if nxt[j] == EOS:
                        done[j] = True
                if done.all():
                    break
                prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
            for j, i in enumerate(idxs):
                results[i] = Hypothesis(toks[j], lps[j])
        return results


class TextTranslator:
    """End-to-end text decoding: segment, decode, detokenize."""

    def __init__(self, params, config, src_segmenter, src_vocab, trg_vocab):
        self.translator = Translator(params, config)
        self.src_segmenter = src_segmenter
        self.src_vocab = src_vocab
        self.trg_vocab = trg_vocab

    def _ids(self, line: str) -> list[int]:
        return self.src_vocab.ids(self.src_segmenter(line))

    def _surface(self, hyp: Hypothesis) -> str:
        return detokenize(self.trg_vocab.tokens(hyp.surface_ids()))

    def translate_line(self, line: str, beam: int = 5) -> str:
        if beam <= 1:
            return self._surface(self.translator.greedy(self._ids(line)))
        return self._surface(self.translator.beam(self._ids(line), beam, 1).best())

    def nbest_line(self, line: str, beam: int = 5, n_best: int = 5):
        nbest = self.translator.beam(self._ids(line), beam, n_best)
        return [(self._surface(h), h.score) for h in nbest.hypotheses]

    def greedy_lines(self, lines: list[str]) -> list[str]:
        hyps = self.translator.greedy_batch([self._ids(line) for line in lines])
        return [self._surface(h) for h in hyps]
