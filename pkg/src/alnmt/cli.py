"""Command-line entry point.

Modes: prepare, learn-bpe, train, test, translate, active-learn, report,
serve-annotation. Every artifact-producing mode works inside a run directory
it locks exclusively; the resolved configuration is snapshotted there so a
run can be reproduced from the directory alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import threading
from pathlib import Path

from . import active_loop as alp
from . import bpe
from . import config as cfgmod
from . import corpus as cp
from . import metrics
from . import model as md
from . import toy
from . import trainer as tr
from .config import ConfigError, ExperimentConfig
from .decoding import TextTranslator
from .pipeline import Assets, encode_corpus, make_devset
from .service import LiveRun, create_app


class RunLock:
    """Exclusive ownership of a run directory via a lock file."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / "run.lock"
        self.acquired = False

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"{self.path} exists: another process owns this run directory "
                "(remove the lock file if that process is gone)")
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self.acquired = True
        return self

    def __exit__(self, *exc):
        if self.acquired:
            self.path.unlink(missing_ok=True)
        return False


# ---------------------------------------------------------------------------
# artifact paths inside a prepared-data prefix

def _split_paths(prefix: Path, tag: str):
    return (prefix.with_name(f"{prefix.name}.{tag}.src"),
            prefix.with_name(f"{prefix.name}.{tag}.trg"))


def _artifact(prefix: Path, name: str) -> Path:
    return prefix.with_name(f"{prefix.name}.{name}")


def write_pool_file(pool: cp.MonolingualPool, path: Path) -> None:
    lines = ["id\tsource\thidden_reference"]
    for e in pool.entries:
        lines.append(f"{e.id}\t{e.source}\t{e.hidden_reference or ''}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pool_file(path: Path) -> cp.MonolingualPool:
    lines = path.read_text(encoding="utf-8").splitlines()
    entries = []
    for line in lines[1:]:
        sid, source, ref = line.split("\t")
        entries.append(cp.PoolEntry(int(sid), source, ref or None))
    return cp.MonolingualPool(entries)


def _load_stop_words(cfg: ExperimentConfig) -> set[str]:
    if not cfg.data.remove_stop_words:
        return set()
    if not cfg.data.stop_words_file:
        raise ConfigError("data.remove_stop_words needs data.stop_words_file")
    return set(Path(cfg.data.stop_words_file).read_text(encoding="utf-8").split())


def _strip_stop_words(corpus: cp.ParallelCorpus, stop: set[str]) -> cp.ParallelCorpus:
    if not stop:
        return corpus
    out = []
    for p in corpus.pairs:
        src = " ".join(w for w in p.source.split() if w not in stop)
        trg = " ".join(w for w in p.target.split() if w not in stop)
        if src and trg:
            out.append(cp.SentencePair(p.id, src, trg))
    return cp.ParallelCorpus(out, corpus.split_tag)


# ---------------------------------------------------------------------------
# modes

def mode_prepare(cfg: ExperimentConfig, run_dir: Path) -> int:
    prefix = Path(cfg.data.prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    if cfg.data.synthetic:
        corpus = toy.toy_corpus(cfg.data.synthetic_size, cfg.run.seed, cfg.data.synthetic)
        stats = {"total": len(corpus), "kept": len(corpus)}
    else:
        if not cfg.data.source_file or not cfg.data.target_file:
            raise ConfigError("prepare needs data.source_file and data.target_file "
                              "(or data.synthetic)")
        src_lines = Path(cfg.data.source_file).read_text(encoding="utf-8").splitlines()
        trg_lines = Path(cfg.data.target_file).read_text(encoding="utf-8").splitlines()
        corpus, stats = cp.ingest(src_lines, trg_lines, cfg.data.script_src,
                                  cfg.data.script_trg)
    corpus = _strip_stop_words(corpus, _load_stop_words(cfg))
    train_c, dev_c, test_c = cp.split(corpus, cfg.data.dev_size, cfg.data.test_size,
                                      cfg.run.seed)
    cp.write_split_files(prefix, train_c, dev_c, test_c)
    baseline, pool = cp.partition_for_al(train_c, cfg.data.baseline_fraction, cfg.run.seed)
    bsrc, btrg = _split_paths(prefix, "baseline")
    bsrc.write_text("\n".join(baseline.sources()) + "\n", encoding="utf-8")
    btrg.write_text("\n".join(baseline.targets()) + "\n", encoding="utf-8")
    write_pool_file(pool, _artifact(prefix, "pool.tsv"))
    summary = {
        "ingested": stats, "train": len(train_c), "dev": len(dev_c),
        "test": len(test_c), "baseline": len(baseline), "pool": len(pool),
    }
    (run_dir / "prepare.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return 0


def mode_learn_bpe(cfg: ExperimentConfig, run_dir: Path) -> int:
    prefix = Path(cfg.data.prefix)
    src_path, trg_path = _split_paths(prefix, "train")
    train_c = cp.read_parallel_files(src_path, trg_path)
    src_model = bpe.learn_bpe(train_c.sources(), cfg.bpe.merges)
    trg_model = bpe.learn_bpe(train_c.targets(), cfg.bpe.merges)
    bpe.save_merges(src_model, _artifact(prefix, "bpe.src"))
    bpe.save_merges(trg_model, _artifact(prefix, "bpe.trg"))
    src_seg = bpe.Segmenter(src_model)
    trg_seg = bpe.Segmenter(trg_model)
    src_vocab = bpe.Vocabulary.build(src_seg(s) for s in train_c.sources())
    trg_vocab = bpe.Vocabulary.build(trg_seg(t) for t in train_c.targets())
    bpe.save_vocab(src_vocab, _artifact(prefix, "vocab.src"))
    bpe.save_vocab(trg_vocab, _artifact(prefix, "vocab.trg"))
    print(f"learned {src_model.merge_count}/{trg_model.merge_count} merges; "
          f"vocab sizes {len(src_vocab)}/{len(trg_vocab)}")
    return 0


def load_assets(cfg: ExperimentConfig) -> Assets:
    prefix = Path(cfg.data.prefix)
    return Assets(
        bpe.load_merges(_artifact(prefix, "bpe.src")),
        bpe.load_merges(_artifact(prefix, "bpe.trg")),
        bpe.load_vocab(_artifact(prefix, "vocab.src")),
        bpe.load_vocab(_artifact(prefix, "vocab.trg")),
    )


def _model_config(cfg: ExperimentConfig, assets: Assets) -> md.ModelConfig:
    m = cfg.model
    return md.ModelConfig(
        src_vocab=len(assets.src_vocab), trg_vocab=len(assets.trg_vocab),
        d=m.d, heads=m.heads, layers=m.layers, ffn_width=m.ffn_width,
        max_length=m.max_length, dropout=cfg.train.dropout,
        tie_weights=m.tie_weights, scaled_attention=m.scaled_attention,
    )


def mode_train(cfg: ExperimentConfig, run_dir: Path) -> int:
    prefix = Path(cfg.data.prefix)
    assets = load_assets(cfg)
    tag = "baseline" if cfg.data.corpus == "baseline" else "train"
    train_c = cp.read_parallel_files(*_split_paths(prefix, tag))
    dev_c = cp.read_parallel_files(*_split_paths(prefix, "dev"))
    mcfg = _model_config(cfg, assets)
    params = md.init_params(mcfg, cfg.train.seed)
    result = tr.train(params, mcfg, encode_corpus(assets, train_c),
                      make_devset(assets, dev_c), cfg.train, run_dir=run_dir)
    best = result.best_checkpoint or ""
    (run_dir / "best_checkpoint.txt").write_text(best + "\n")
    last = result.log[-1]
    print(f"finished at step {result.state.step}: dev ppl {last['dev_ppl']:.4f}, "
          f"dev BLEU% {100 * last['dev_bleu']:.2f}")
    print(f"best checkpoint: {best}")
    return 0


def _resolve_checkpoint(cfg: ExperimentConfig, run_dir: Path, arg: str | None) -> Path:
    if arg:
        return Path(arg)
    pointer = run_dir / "best_checkpoint.txt"
    if pointer.exists():
        path = pointer.read_text().strip()
        if path:
            return Path(path)
    raise ConfigError("no checkpoint: pass --checkpoint or run train in this run directory")


def mode_test(cfg: ExperimentConfig, run_dir: Path, checkpoint: str | None) -> int:
    prefix = Path(cfg.data.prefix)
    assets = load_assets(cfg)
    params, mcfg = md.load_checkpoint(_resolve_checkpoint(cfg, run_dir, checkpoint))
    test_c = cp.read_parallel_files(*_split_paths(prefix, "test"))
    examples = encode_corpus(assets, test_c)
    ppl = metrics.perplexity(params, mcfg, examples)
    translator = TextTranslator(params, mcfg, assets.src_segmenter,
                                assets.src_vocab, assets.trg_vocab)
    hyps = translator.greedy_lines(test_c.sources())
    bleu = metrics.corpus_bleu([h.split() for h in hyps],
                               [r.split() for r in test_c.targets()])
    report = metrics.format_report(bleu, ppl)
    print(report)
    (run_dir / "test_report.json").write_text(json.dumps({
        "bleu": bleu.bleu, "bleu_percent": bleu.percent,
        "precisions": bleu.precisions, "brevity_penalty": bleu.brevity_penalty,
        "candidate_length": bleu.candidate_length,
        "reference_length": bleu.reference_length,
        "perplexity": ppl.perplexity,
    }, indent=2, sort_keys=True) + "\n")
    return 0


def mode_translate(cfg: ExperimentConfig, run_dir: Path, checkpoint: str | None,
                   n_best: int | None, stdin=None, stdout=None) -> int:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    assets = load_assets(cfg)
    params, mcfg = md.load_checkpoint(_resolve_checkpoint(cfg, run_dir, checkpoint))
    translator = TextTranslator(params, mcfg, assets.src_segmenter,
                                assets.src_vocab, assets.trg_vocab)
    for index, line in enumerate(stdin):
        line = line.rstrip("\n")
        cleaned = cp.clean(line, cfg.data.script_src)
        if not cleaned.ok:
            print("" if n_best is None else f"{index} ||| ||| 0.0", file=stdout)
            continue
        if n_best is None:
            print(translator.translate_line(cleaned.text, cfg.decode.beam), file=stdout)
        else:
            for hyp, score in translator.nbest_line(cleaned.text, cfg.decode.beam, n_best):
                print(f"{index} ||| {hyp} ||| {score:.6f}", file=stdout)
    return 0


def _al_ingredients(cfg: ExperimentConfig, run_dir: Path, checkpoint: str | None):
    prefix = Path(cfg.data.prefix)
    assets = load_assets(cfg)
    params, mcfg = md.load_checkpoint(_resolve_checkpoint(cfg, run_dir, checkpoint))
    baseline_c = cp.read_parallel_files(*_split_paths(prefix, "baseline"))
    pool = read_pool_file(_artifact(prefix, "pool.tsv"))
    dev_c = cp.read_parallel_files(*_split_paths(prefix, "dev"))
    return assets, params, mcfg, encode_corpus(assets, baseline_c), pool, \
        make_devset(assets, dev_c)


def mode_active_learn(cfg: ExperimentConfig, run_dir: Path, checkpoint: str | None) -> int:
    assets, params, mcfg, baseline_ex, pool, devset = _al_ingredients(cfg, run_dir, checkpoint)
    print(f"active learning: strategy={cfg.al.strategy} query={cfg.al.query_size} "
          f"budget={cfg.al.budget} normalized_scores={cfg.al.normalized_scores}")
    if cfg.al.oracle == "interactive":
        return _serve_and_run(cfg, run_dir, assets, params, mcfg, baseline_ex, pool, devset)
    final_params, state = alp.run_al(params, mcfg, assets, baseline_ex, pool, devset,
                                     cfg.al, cfg.train, run_dir=run_dir)
    md.save_checkpoint(final_params, mcfg, run_dir / "al_final.bin")
    for rec in state.history:
        print(f"iteration {rec.iteration}: labeled +{len(rec.selected)}, "
              f"dev ppl {rec.dev_ppl:.4f}, dev BLEU% {100 * rec.dev_bleu:.2f}")
    return 0


def _serve_and_run(cfg, run_dir, assets, params, mcfg, baseline_ex, pool, devset,
                   host: str = "127.0.0.1", port: int = 8000) -> int:
    import uvicorn

    queue = alp.AnnotationQueue(strategy=cfg.al.strategy)
    progress = alp.RunProgress()
    stop = threading.Event()
    oracle = alp.InteractiveOracle(queue, stop_event=stop)
    outcome: dict = {}

    def loop():
        try:
            final_params, state = alp.run_al(params, mcfg, assets, baseline_ex, pool,
                                             devset, cfg.al, cfg.train,
                                             run_dir=run_dir, oracle=oracle,
                                             progress=progress)
            md.save_checkpoint(final_params, mcfg, run_dir / "al_final.bin")
            outcome["state"] = state
        except alp.RunAborted as exc:
            outcome["aborted"] = str(exc)
        except Exception as exc:   # surfaced after the server stops
            outcome["error"] = exc

    thread = threading.Thread(target=loop, name="al-loop", daemon=True)
    thread.start()
    static = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    app = create_app(LiveRun(queue, progress), static_dir=static if static.is_dir() else None)
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    finally:
        stop.set()
        thread.join(timeout=30)
    if "error" in outcome:
        raise outcome["error"]
    if "aborted" in outcome:
        print(f"annotation loop persisted and stopped: {outcome['aborted']}")
        print("re-run serve-annotation with the same run directory to resume")
    return 0


def mode_serve_annotation(cfg: ExperimentConfig, run_dir: Path, checkpoint: str | None,
                          host: str, port: int) -> int:
    cfg.al.oracle = "interactive"
    assets, params, mcfg, baseline_ex, pool, devset = _al_ingredients(cfg, run_dir, checkpoint)
    print(f"serving annotation UI on http://{host}:{port}/ "
          f"(strategy={cfg.al.strategy}, query={cfg.al.query_size})")
    return _serve_and_run(cfg, run_dir, assets, params, mcfg, baseline_ex, pool,
                          devset, host, port)


TABLE_ORDER = ["fully_trained", "baseline", "margin", "least_confidence"]


def mode_report(run_dirs: list[str], out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = []
    warnings = []
    for run in run_dirs:
        run = Path(run)
        label = run.name
        snap = run / "config.snapshot.cfg"
        if snap.exists():
            cfg = cfgmod.load_config(snap)
            label = cfg.label()
        curves = []
        log_path = run / "train.log.jsonl"
        if log_path.exists():
            for line in log_path.read_text().splitlines():
                entry = json.loads(line)
                curves.append((entry["step"], entry["train_loss"], entry["lr"],
                               entry["dev_ppl"], entry["dev_bleu"]))
        journal_path = run / "journal.jsonl"
        if journal_path.exists():
            step0 = curves[-1][0] if curves else 0
            for rec in alp.Journal(journal_path).read():
                if rec["event"] == "evaluated":
                    curves.append((step0 + rec["iteration"], None, None,
                                   rec["dev_ppl"], rec["dev_bleu"]))
        if curves:
            lines = ["step\ttrain_loss\tlr\tdev_ppl\tdev_bleu"]
            for row in curves:
                lines.append("\t".join("" if v is None else repr(v) for v in row))
            (out_dir / f"{label}.curve.tsv").write_text("\n".join(lines) + "\n")
        else:
            warnings.append(f"{run}: no training log or journal found")
        final = {}
        report_path = run / "test_report.json"
        if report_path.exists():
            final = json.loads(report_path.read_text())
        elif curves:
            final = {"bleu_percent": 100 * curves[-1][4], "perplexity": curves[-1][3]}
            warnings.append(f"{run}: no test report; falling back to the last dev point")
        columns.append((label, final))

    def order_key(item):
        label = item[0]
        return (TABLE_ORDER.index(label) if label in TABLE_ORDER else len(TABLE_ORDER), label)

    columns.sort(key=order_key)
    header = ["metric"] + [label for label, _ in columns]
    bleu_row = ["BLEU"] + [f"{c.get('bleu_percent', float('nan')):.2f}" for _, c in columns]
    ppl_row = ["Perplexity"] + [f"{c.get('perplexity', float('nan')):.2f}" for _, c in columns]
    table = "\n".join("\t".join(row) for row in (header, bleu_row, ppl_row)) + "\n"
    (out_dir / "final_table.tsv").write_text(table)
    print(table, end="")
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alnmt",
                                     description="small translation engine with an "
                                                 "active-learning loop")
    sub = parser.add_subparsers(dest="mode", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--run-dir", default="runs/default", help="run directory")

    for name in ("prepare", "learn-bpe", "train"):
        common(sub.add_parser(name))
    for name in ("test", "translate", "active-learn"):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--checkpoint", help="model checkpoint (defaults to the "
                                            "run directory's best)")
    sub.choices["translate"].add_argument("--nbest", type=int, default=None,
                                          help="emit an N-best list per line")
    sub.choices["active-learn"].add_argument("--strategy", choices=["least_confidence",
                                                                    "margin", "random"])
    sub.choices["active-learn"].add_argument("--oracle", choices=["simulated",
                                                                  "interactive"])
    sub.choices["active-learn"].add_argument("--retrain-full", action="store_true",
                                             help="retrain from scratch each iteration "
                                                  "instead of fine-tuning")
    p = sub.add_parser("serve-annotation")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p = sub.add_parser("report")
    p.add_argument("runs", nargs="+", help="run directories to compare")
    p.add_argument("--out", default="report", help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.mode == "report":
            return mode_report(args.runs, Path(args.out))
        config_path = args.config
        if config_path is None:
            # run directories are self-contained: reuse their snapshot
            candidate = Path(args.run_dir) / "config.snapshot.cfg"
            if candidate.exists():
                config_path = candidate
        cfg = cfgmod.load_config(config_path, args.overrides)
        if args.mode == "active-learn":
            if args.strategy:
                cfg.al.strategy = args.strategy
            if args.oracle:
                cfg.al.oracle = args.oracle
            if args.retrain_full:
                cfg.al.retrain_full = True
        run_dir = Path(args.run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        with RunLock(run_dir):
            cfgmod.write_snapshot(cfg, run_dir)
            if args.mode == "prepare":
                return mode_prepare(cfg, run_dir)
            if args.mode == "learn-bpe":
                return mode_learn_bpe(cfg, run_dir)
            if args.mode == "train":
                return mode_train(cfg, run_dir)
            if args.mode == "test":
                return mode_test(cfg, run_dir, args.checkpoint)
            if args.mode == "translate":
                return mode_translate(cfg, run_dir, args.checkpoint, args.nbest)
            if args.mode == "active-learn":
                return mode_active_learn(cfg, run_dir, args.checkpoint)
            if args.mode == "serve-annotation":
                return mode_serve_annotation(cfg, run_dir, args.checkpoint,
                                             args.host, args.port)
        raise AssertionError(f"unhandled mode {args.mode}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (cp.CorpusError, md.ShapeError, tr.TrainingDiverged, alp.OracleError,
            FileNotFoundError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
