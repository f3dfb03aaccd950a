"""Glue between text corpora and the id-level model: segmenters, vocabularies,
and encoded example lists."""

from __future__ import annotations

from dataclasses import dataclass

from . import bpe
from .corpus import ParallelCorpus
from .trainer import DevSet


@dataclass
class Assets:
    """Tokenization state shared by every stage of one experiment."""
    src_bpe: bpe.BpeModel
    trg_bpe: bpe.BpeModel
    src_vocab: bpe.Vocabulary
    trg_vocab: bpe.Vocabulary

    def __post_init__(self):
        self._src_seg = bpe.Segmenter(self.src_bpe)
        self._trg_seg = bpe.Segmenter(self.trg_bpe)

    def encode_source(self, text: str) -> list[int]:
        return self.src_vocab.ids(self._src_seg(text))

    def encode_target(self, text: str) -> list[int]:
        return self.trg_vocab.ids(self._trg_seg(text))

    def encode_pair(self, src_text: str, trg_text: str):
        return self.encode_source(src_text), self.encode_target(trg_text)

    @property
    def src_segmenter(self):
        return self._src_seg

    @property
    def trg_segmenter(self):
        return self._trg_seg


def build_assets(train: ParallelCorpus, num_merges: int) -> Assets:
    """Learn per-language BPE models on the training split only and build the
    vocabularies from its segmented output (dev/test unknowns map to unk)."""
    src_bpe = bpe.learn_bpe(train.sources(), num_merges)
    trg_bpe = bpe.learn_bpe(train.targets(), num_merges)
    src_seg = bpe.Segmenter(src_bpe)
    trg_seg = bpe.Segmenter(trg_bpe)
    src_vocab = bpe.Vocabulary.build(src_seg(s) for s in train.sources())
    trg_vocab = bpe.Vocabulary.build(trg_seg(t) for t in train.targets())
    return Assets(src_bpe, trg_bpe, src_vocab, trg_vocab)


def encode_corpus(assets: Assets, corpus: ParallelCorpus):
    return [assets.encode_pair(p.source, p.target) for p in corpus.pairs]


def make_devset(assets: Assets, dev: ParallelCorpus) -> DevSet:
    return DevSet(encode_corpus(assets, dev), dev.targets(), assets.trg_vocab)
