"""Acceptance suite: every release criterion, each as one test with a printed
pass/fail line (see conftest). Tolerances are pinned here, not configurable.

The heavyweight entries are the Algorithm-invariants run, the toy-task
training run, and the label-efficiency comparison; everything else is
sub-second oracle checking. Budget the full module at roughly 15 minutes on
two desktop cores.
"""

import itertools
import math
import time

import numpy as np
import pytest

from alnmt import acquisition as acq
from alnmt import active_loop as alp
from alnmt import bpe
from alnmt import cli
from alnmt import decoding as dec
from alnmt import metrics as mt
from alnmt import model as md
from alnmt import numerics as nm
from alnmt import pipeline, toy, trainer
from alnmt.bpe import BOS, EOS, PAD, detokenize
from alnmt.corpus import partition_for_al, split
from alnmt.decoding import Hypothesis, NBestList


# ---------------------------------------------------------------------------
# 1. metric oracles

def _brute_force_bleu(cands, refs, n_max=4):
    def grams(seq, n):
        d = {}
        for i in range(len(seq) - n + 1):
            g = tuple(seq[i:i + n])
            d[g] = d.get(g, 0) + 1
        return d
    c = sum(len(x) for x in cands)
    r = sum(len(x) for x in refs)
    ps = []
    for n in range(1, n_max + 1):
        clipped = total = 0
        for cand, ref in zip(cands, refs):
            cg, rg = grams(cand, n), grams(ref, n)
            for g, k in cg.items():
                total += k
                clipped += min(k, rg.get(g, 0))
        ps.append(clipped / total if total else 0.0)
    if c == 0:
        return 0.0
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    if min(ps) == 0.0:
        return 0.0
    return bp * math.exp(sum(math.log(p) for p in ps) / n_max)


def test_metric_oracles():
    start = time.time()
    rng = np.random.default_rng(77)
    vocab = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran", "red", "big"]
    for _ in range(50):
        n = int(rng.integers(1, 7))
        refs, cands = [], []
        for _ in range(n):
            ref = [vocab[i] for i in rng.integers(0, 10, size=rng.integers(3, 11))]
            cand = [w if rng.random() > 0.3 else vocab[rng.integers(0, 10)] for w in ref]
            if rng.random() < 0.3 and len(cand) > 2:
                cand = cand[:-2]
            refs.append(ref)
            cands.append(cand)
        assert abs(mt.corpus_bleu(cands, refs).bleu - _brute_force_bleu(cands, refs)) < 1e-9

    refs = [["the", "cat", "sat", "on", "a", "mat"], ["a", "big", "dog", "ran"]]
    assert mt.corpus_bleu([list(r) for r in refs], refs).bleu == 1.0

    bp = mt.corpus_bleu([["a"] * 5], [["b"] * 10]).brevity_penalty
    assert abs(bp - math.exp(-1.0)) < 1e-12

    clip = mt.corpus_bleu([["the"] * 4], [["the", "cat", "is", "on", "the", "mat"]],
                          n_max=1, weights=[1.0])
    assert abs(clip.precisions[0] - 0.5) < 1e-12
    assert time.time() - start < 1.0


# ---------------------------------------------------------------------------
# 2. perplexity identities

def test_perplexity_identities():
    start = time.time()
    cfg = md.ModelConfig(src_vocab=16, trg_vocab=16, d=8, heads=2, layers=1,
                         ffn_width=8, max_length=16, dropout=0.0)
    params = md.init_params(cfg, seed=0)
    for _, t in params.items():
        t.data[:] = 0.0
    rep = mt.perplexity(params, cfg, [([4, 5], [6, 7]), ([8], [9, 10, 11])])
    assert abs(rep.perplexity - 16.0) < 1e-9

    rng = np.random.default_rng(3)
    for _ in range(5):
        lps = np.log(rng.uniform(0.05, 1.0, size=rng.integers(1, 30)))
        rep = mt.perplexity_from_token_logprobs(list(lps))
        assert rep.perplexity == 2.0 ** rep.cross_entropy_bits
    assert time.time() - start < 1.0


# ---------------------------------------------------------------------------
# 3. gradient check

def test_gradient_check():
    start = time.time()
    cfg = md.ModelConfig(src_vocab=16, trg_vocab=16, d=8, heads=2, layers=1,
                         ffn_width=16, max_length=16, dropout=0.0)
    params = md.init_params(cfg, seed=11, dtype=np.float64)
    batch = md.make_batch([([4, 5, 6], [7, 8]), ([9, 10], [11, 12, 13])], cfg)
    loss, _ = md.sequence_loss(batch, params, cfg, eps_ls=0.1)
    loss.backward()
    analytic = params.grads()

    def loss_value():
        with nm.no_grad():
            l, _ = md.sequence_loss(batch, params, cfg, eps_ls=0.1)
        return l.item()

    numeric = nm.finite_difference(loss_value, params.arrays(), step=1e-4)
    worst = 0.0
    for name in params.names():
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    assert worst < 1e-3, f"max relative error {worst}"
    assert time.time() - start < 60.0


# ---------------------------------------------------------------------------
# 4. causality

def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_causality():
    cfg = md.ModelConfig(src_vocab=16, trg_vocab=16, d=8, heads=2, layers=2,
                         ffn_width=16, max_length=16, dropout=0.0, tie_weights=False)
    params = md.init_params(cfg, seed=7)
    src = np.array([[4, 5, 6, EOS]], dtype=np.int64)
    trg_in = np.array([[BOS, 5, 6, 7, 8, 9]], dtype=np.int64)
    with nm.no_grad():
        h_enc = md.encode_batch(src, None, params, cfg)
        base = md.decode_batch(trg_in, None, h_enc, None, params, cfg).data[0]
    # swapping any future input token leaves earlier distributions unchanged
    for t_prime in range(1, trg_in.shape[1]):
        altered = trg_in.copy()
        altered[0, t_prime] = (altered[0, t_prime] + 3) % cfg.trg_vocab
        with nm.no_grad():
            out = md.decode_batch(altered, None, h_enc, None, params, cfg).data[0]
        assert np.max(np.abs(_softmax(base[:t_prime]) - _softmax(out[:t_prime]))) < 1e-9
    # perturbing the embedding of a token that only appears at the last
    # position leaves every earlier distribution unchanged
    trg_in = np.array([[BOS, 5, 6, 13]], dtype=np.int64)
    with nm.no_grad():
        base = md.decode_batch(trg_in, None, h_enc, None, params, cfg).data[0]
    params["trg_embed"].data[13] += 0.37
    with nm.no_grad():
        out = md.decode_batch(trg_in, None, h_enc, None, params, cfg).data[0]
    assert np.max(np.abs(_softmax(base[:3]) - _softmax(out[:3]))) < 1e-9


# ---------------------------------------------------------------------------
# 5. decoder equivalences

def test_decoder_equivalences():
    cfg = md.ModelConfig(src_vocab=24, trg_vocab=24, d=16, heads=2, layers=1,
                         ffn_width=32, max_length=12, dropout=0.0)
    params = md.init_params(cfg, seed=5)
    translator = dec.Translator(params, cfg)
    rng = np.random.default_rng(9)
    for _ in range(100):
        src = rng.integers(4, 24, size=rng.integers(1, 8)).tolist()
        greedy = translator.greedy(src)
        beam_one = translator.beam(src, beam=1, n_best=1).best()
        assert greedy.tokens == beam_one.tokens

    v = 6
    model = dec.ScriptedModel(v, [
        np.array([0.02, 0.02, 0.02, 0.04, 0.50, 0.40]),
        np.array([0.02, 0.02, 0.02, 0.70, 0.14, 0.10]),
    ])
    hyps = dec.beam_decode(model, beam=2, n_best=2, max_len=2)
    complete, cut = [], []
    for seq in itertools.product(range(v), repeat=2):
        toks, lps, prefix = [], [], [BOS]
        for tok in seq:
            row = model(np.asarray([prefix]))[0]
            toks.append(tok)
            lps.append(float(row[tok]))
            if tok == EOS:
                break
            prefix.append(tok)
        if toks[-1] == EOS:
            if len(toks) == 1 and any(s != EOS for s in seq[1:]):
                continue
            complete.append((toks, lps))
        else:
            cut.append((toks, lps))
    key = lambda e: -(sum(e[1]) / len(e[0]))
    expected = (sorted(complete, key=key) + sorted(cut, key=key))[:2]
    assert [h.tokens for h in hyps] == [toks for toks, _ in expected]
    for h, (toks, lps) in zip(hyps, expected):
        assert h.score == sum(lps) / len(toks)


# ---------------------------------------------------------------------------
# 6. acquisition formulas

def _nbest(sid, probs):
    return NBestList(sid, [Hypothesis([EOS], [math.log(p)]) for p in probs])


def test_acquisition_formulas():
    assert abs(acq.least_confidence(_nbest(0, [0.3])).value - 0.7) < 1e-12
    assert abs(acq.margin(_nbest(0, [0.6, 0.1])).value - (-0.5)) < 1e-12
    assert abs(acq.margin(_nbest(0, [0.4, 0.4])).value) < 1e-12

    class Stub:
        def __init__(self, tables):
            self.tables = tables
        def beam(self, ids, beam, n_best, source_id):
            return self.tables[source_id]

    rng = np.random.default_rng(13)
    tables, sample = {}, []
    for sid in range(20):
        p1 = float(rng.uniform(0.05, 0.95))
        p2 = float(rng.uniform(0.0, p1))
        tables[sid] = _nbest(sid, [p1, p2])
        sample.append((sid, [4]))
    for strategy in ("least_confidence", "margin"):
        scores = acq.score_pool(sample, Stub(tables), strategy, beam=5, n_best=2)
        picked = acq.select_top(scores, 7)
        def formula(sid):
            p1 = math.exp(tables[sid].hypotheses[0].score)
            p2 = math.exp(tables[sid].hypotheses[1].score)
            return 1.0 - p1 if strategy == "least_confidence" else -(p1 - p2)
        expected = sorted(range(20), key=lambda sid: (-formula(sid), sid))[:7]
        assert picked == expected


# ---------------------------------------------------------------------------
# 7. Algorithm-1 loop invariants (pool 1500, B=100, budget 5)

def test_algorithm_invariants(tmp_path):
    start = time.time()
    seed = 71
    corpus = toy.toy_corpus(1900, seed, task="reverse")
    rest, dev_c, _ = split(corpus, 100, 0, seed=seed)   # 1800 left
    base_c, pool = partition_for_al(rest, 300 / len(rest), seed=seed)
    assert len(pool) == 1500
    assets = pipeline.build_assets(rest, num_merges=0)
    cfg = md.ModelConfig(src_vocab=len(assets.src_vocab), trg_vocab=len(assets.trg_vocab),
                         d=32, heads=4, layers=1, ffn_width=64, max_length=12, dropout=0.0)
    devset = pipeline.make_devset(assets, dev_c)
    tc = trainer.TrainConfig(epochs=5, batch_tokens=512, validate_every=100,
                             warmup_steps=50, lr0=1e-3, dropout=0.0, seed=seed)
    base_ex = pipeline.encode_corpus(assets, base_c)
    result = trainer.train(md.init_params(cfg, seed=seed), cfg, base_ex, devset, tc)
    alcfg = alp.ALConfig(strategy="least_confidence", query_size=100, budget=5,
                         pool_sample_fraction=0.1, fine_tune_epochs=1,
                         beam=3, n_best=2, seed=seed)
    _, state = alp.run_al(result.params, cfg, assets, base_ex, pool, devset,
                          alcfg, tc, run_dir=tmp_path)

    events = alp.Journal(tmp_path / "journal.jsonl").read()
    pool_sizes = [e["pool_size"] for e in events if e["event"] == "iteration_started"]
    completed = [e for e in events if e["event"] == "iteration_completed"]
    assert pool_sizes == [1500, 1400, 1300, 1200, 1100]
    assert [e["pool_remaining"] for e in completed] == [1400, 1300, 1200, 1100, 1000]
    assert [e["labeled_total"] for e in completed] == [400, 500, 600, 700, 800]
    assert len(state.labeled_from_pool) == 500
    labeled = set(state.labeled_from_pool)
    remaining = set(state.pool_remaining)
    assert not labeled & remaining
    assert labeled | remaining == set(pool.ids())

    replayed = alp.replay_journal(tmp_path / "journal.jsonl", pool)
    assert replayed.iteration == state.iteration
    assert replayed.labeled_from_pool == state.labeled_from_pool
    assert replayed.pool_remaining == state.pool_remaining
    assert [(r.iteration, r.selected, r.dev_ppl, r.dev_bleu, r.checkpoint)
            for r in replayed.history] == \
        [(r.iteration, r.selected, r.dev_ppl, r.dev_bleu, r.checkpoint)
         for r in state.history]
    assert time.time() - start < 600.0


# ---------------------------------------------------------------------------
# 8. BPE oracle

def test_bpe_oracle():
    corpus = ["low"] * 5 + ["lower"] * 2 + ["newest"] * 6 + ["widest"] * 3
    words = []
    for s in corpus:
        for w in s.split():
            words.append([c + "@@" for c in w[:-1]] + [w[-1]])
    expected = []
    for _ in range(10):
        counts = {}
        for w in words:
            for i in range(len(w) - 1):
                pair = (w[i], w[i + 1])
                counts[pair] = counts.get(pair, 0) + 1
        if not counts or max(counts.values()) < 2:
            break
        best_count = max(counts.values())
        best = min(p for p, c in counts.items() if c == best_count)
        expected.append(best)
        merged = best[0][:-2] + best[1]
        for w in words:
            i = 0
            while i < len(w) - 1:
                if w[i] == best[0] and w[i + 1] == best[1]:
                    w[i:i + 2] = [merged]
                else:
                    i += 1
    model = bpe.learn_bpe(corpus, 10)
    assert model.merges == expected

    rng = np.random.default_rng(21)
    sentences = []
    for _ in range(150):
        ws = ["".join(rng.choice(list("abcdefgh"), size=rng.integers(1, 8)))
              for _ in range(rng.integers(1, 7))]
        sentences.append(" ".join(ws))
    toy_model = bpe.learn_bpe(sentences, 30)
    seg = bpe.Segmenter(toy_model)
    for s in sentences:
        assert detokenize(seg(s)) == s


# ---------------------------------------------------------------------------
# 9. toy-task learning (vocab 20, 2k pairs, d=64)

def test_toy_task_learning():
    start = time.time()
    corpus = toy.toy_corpus(2200, seed=42, task="reverse")
    train_c, dev_c, _ = split(corpus, 200, 0, seed=42)
    assets = pipeline.build_assets(train_c, num_merges=0)
    assert len(assets.src_vocab) == 24    # 20 symbols + 4 specials
    cfg = md.ModelConfig(src_vocab=len(assets.src_vocab), trg_vocab=len(assets.trg_vocab),
                         d=64, heads=4, layers=2, ffn_width=256, max_length=12,
                         dropout=0.1)
    tc = trainer.TrainConfig(epochs=30, batch_tokens=512, validate_every=400,
                             warmup_steps=300, lr0=2e-3, dropout=0.1, seed=1)
    result = trainer.train(md.init_params(cfg, seed=1), cfg,
                           pipeline.encode_corpus(assets, train_c),
                           pipeline.make_devset(assets, dev_c), tc)
    translator = dec.Translator(result.params, cfg)
    dev_examples = pipeline.encode_corpus(assets, dev_c)
    hyps = translator.greedy_batch([s for s, _ in dev_examples])
    cands = [detokenize(assets.trg_vocab.tokens(h.surface_ids())) for h in hyps]
    exact = float(np.mean([c == r for c, r in zip(cands, dev_c.targets())]))
    bleu = mt.corpus_bleu([c.split() for c in cands],
                          [r.split() for r in dev_c.targets()]).bleu
    elapsed = time.time() - start
    print(f"\n[acceptance] toy task: exact match {exact:.3f}, BLEU {bleu:.3f}, "
          f"{elapsed:.0f}s", flush=True)
    assert exact >= 0.80
    assert bleu >= 0.90
    assert elapsed < 600.0


# ---------------------------------------------------------------------------
# 10. label efficiency of uncertainty sampling (scaled comparison)

def test_al_effectiveness():
    start = time.time()
    seeds = (101, 202, 303, 404, 505)
    query, budget = 100, 5
    lc_pass = margin_pass = 0
    for seed in seeds:
        corpus = toy.toy_corpus(2250, seed, task="reverse")
        rest, dev_c, _ = split(corpus, 250, 0, seed=seed)
        base_c, pool = partition_for_al(rest, 500 / len(rest), seed=seed)
        assert len(base_c) == 500 and len(pool) == 1500
        assets = pipeline.build_assets(rest, num_merges=0)
        cfg = md.ModelConfig(src_vocab=len(assets.src_vocab),
                             trg_vocab=len(assets.trg_vocab),
                             d=64, heads=4, layers=2, ffn_width=256,
                             max_length=12, dropout=0.1)
        devset = pipeline.make_devset(assets, dev_c)
        tc = trainer.TrainConfig(epochs=60, batch_tokens=512, validate_every=300,
                                 warmup_steps=300, lr0=2e-3, dropout=0.1, seed=seed)
        base_ex = pipeline.encode_corpus(assets, base_c)
        baseline = trainer.train(md.init_params(cfg, seed=seed), cfg, base_ex,
                                 devset, tc)
        ft_tc = trainer.TrainConfig(epochs=60, batch_tokens=512, validate_every=300,
                                    warmup_steps=300, lr0=1e-3, dropout=0.1, seed=seed)
        curves = {}
        for strategy in ("random", "least_confidence", "margin"):
            alcfg = alp.ALConfig(strategy=strategy, query_size=query, budget=budget,
                                 pool_sample_fraction=0.3, fine_tune_epochs=4,
                                 beam=5, n_best=2, seed=seed)
            _, state = alp.run_al(baseline.params.clone(), cfg, assets,
                                  list(base_ex), pool, devset, alcfg, ft_tc)
            curves[strategy] = [r.dev_bleu for r in state.history]
        threshold = curves["random"][-1]
        random_labels = budget * query
        labels_needed = {}
        for strategy in ("least_confidence", "margin"):
            crossed = next((query * (i + 1) for i, b in enumerate(curves[strategy])
                            if b >= threshold), None)
            labels_needed[strategy] = crossed
        if labels_needed["least_confidence"] is not None \
                and labels_needed["least_confidence"] <= random_labels:
            lc_pass += 1
        if labels_needed["margin"] is not None \
                and labels_needed["margin"] <= random_labels:
            margin_pass += 1
        print(f"\n[acceptance] seed {seed}: random final {threshold:.3f} "
              f"({random_labels} labels), least_confidence needs "
              f"{labels_needed['least_confidence']}, margin needs "
              f"{labels_needed['margin']}", flush=True)
    elapsed = time.time() - start
    print(f"\n[acceptance] label efficiency: least_confidence {lc_pass}/5, "
          f"margin {margin_pass}/5, {elapsed:.0f}s", flush=True)
    assert lc_pass >= 4
    assert margin_pass >= 4
    assert elapsed < 3600.0


# ---------------------------------------------------------------------------
# 11. determinism

PINNED = [
    "run.seed=2024",
    "data.synthetic=reverse",
    "data.synthetic_size=140",
    "data.dev_size=16",
    "data.test_size=16",
    "data.baseline_fraction=0.55",
    "bpe.merges=0",
    "model.d=16", "model.heads=2", "model.layers=1", "model.ffn_width=32",
    "model.max_length=12",
    "train.epochs=2", "train.batch_tokens=128", "train.validate_every=20",
    "train.warmup_steps=10", "train.dropout=0.0", "train.lr0=0.001",
    "data.corpus=baseline",
    "al.query_size=6", "al.budget=2", "al.pool_sample_fraction=0.5",
    "al.beam=2", "al.fine_tune_epochs=1",
]


def test_determinism(tmp_path):
    blobs = []
    for run in ("one", "two"):
        base = tmp_path / run
        ov = []
        for item in [f"data.prefix={base}/data/toy"] + PINNED:
            ov.extend(["--set", item])
        assert cli.main(["prepare", "--run-dir", str(base / "prep"), *ov]) == 0
        assert cli.main(["learn-bpe", "--run-dir", str(base / "bpe"), *ov]) == 0
        assert cli.main(["train", "--run-dir", str(base / "train"), *ov]) == 0
        best = (base / "train" / "best_checkpoint.txt").read_text().strip()
        assert cli.main(["active-learn", "--run-dir", str(base / "al"),
                         "--checkpoint", best, "--strategy", "least_confidence",
                         "--oracle", "simulated", *ov]) == 0
        blobs.append(((base / "train" / "train.log.jsonl").read_bytes(),
                      (base / "al" / "journal.jsonl").read_bytes()))
    assert blobs[0][0] == blobs[1][0], "training logs differ"
    assert blobs[0][1] == blobs[1][1], "journals differ"
