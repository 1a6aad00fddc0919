"""Command-line entry point.

Subcommands: ingest, synth, pretrain, finetune, evaluate, sweep, gradcheck,
casestudy. Every run resolves its options as flags > config file > defaults,
writes the resolved configuration (plus the code version) next to its
outputs, and is fully reproducible from that file and the seed.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import figures
from .assembly import SequenceBuilder, build_pretrain_examples, save_examples
from .autodiff import NumericsError
from .checkpoint import CheckpointError, load_params
from .corpus import (Corpus, DataError, SyntheticConfig, build_corpus, corpus_stats,
                     generate_synthetic, load_corpus, parse_posts, read_keyvalues,
                     save_corpus)
from .encoder import ModelConfig, init_params
from .evaluation import evaluate, save_report, score_matrix
from .finetune import FinetuneRun, finetune_loop, lr_sweep
from .gradcheck import GradCheckError, run_gradcheck
from .pretrain import PretrainRun, pretrain_loop
from .vocab import Vocabulary, build_vocab, load_vocab, save_vocab

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); keep 2 for data errors
        raise UsageError(message)


def _flag(parser, name, type_, help_):
    parser.add_argument(name, type=type_, default=None, help=help_)


def _switch(parser, name, help_):
    parser.add_argument(name, action="store_const", const=True, default=None, help=help_)


def _coerce(text: str, default):
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def resolve_options(args, defaults: dict) -> dict:
    """flags > config file > defaults."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        for key, value in read_keyvalues(config_path).items():
            if key not in defaults:
                raise UsageError(f"unknown config key '{key}' in {config_path}")
            resolved[key] = _coerce(value, defaults[key])
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


# filesystem locations are recorded but excluded from the fingerprint, so
# identically configured runs in different directories stay byte-identical
_PATH_KEYS = {"out", "corpus", "eval_corpus", "checkpoint_corpus", "checkpoint", "posts"}


def write_run_config(out_dir, command: str, resolved: dict) -> str:
    """Persist the resolved run configuration; returns its fingerprint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"command = {command}", f"version = {__version__}"]
    lines += [f"{k} = {resolved[k]}" for k in sorted(resolved)]
    text = "\n".join(lines) + "\n"
    (out / "run_config.txt").write_text(text, encoding="utf-8")
    semantic = [f"command = {command}", f"version = {__version__}"]
    semantic += [f"{k} = {resolved[k]}" for k in sorted(resolved) if k not in _PATH_KEYS]
    return hashlib.sha256("\n".join(semantic).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Corpus artifacts
# ---------------------------------------------------------------------------

def _finalize_corpus_dir(questions, answers, out_dir, min_freq: int) -> tuple[Corpus, Vocabulary]:
    """Build, persist, and summarize a corpus directory. The vocabulary is
    fit on training-window titles only, like the vote normalizer."""
    corpus = build_corpus(questions, answers)
    train_end = max(corpus.questions[q].creation_time for q in corpus.split.train)
    train_titles = [q.title for q in corpus.questions.values() if q.creation_time <= train_end]
    vocab = build_vocab(train_titles, min_freq=min_freq)
    out = Path(out_dir)
    save_corpus(corpus, out)
    save_vocab(vocab, out / "vocab.txt")
    with open(out / "meta.txt", "a", encoding="utf-8") as fh:
        fh.write(f"vocab_min_freq = {min_freq}\n")
        fh.write(f"vocab_size = {len(vocab)}\n")

    stats = corpus_stats(corpus)
    header = ["density_pct", "questions", "answerers", "answers", "avg_title_length"]
    values = [f"{stats['density_pct']:.4f}", str(stats["questions"]), str(stats["answerers"]),
              str(stats["answers"]), f"{stats['avg_title_length']:.2f}"]
    widths = [max(len(h), len(v)) for h, v in zip(header, values)]
    table = ("  ".join(h.rjust(w) for h, w in zip(header, widths)) + "\n"
             + "  ".join(v.rjust(w) for v, w in zip(values, widths)) + "\n")
    (out / "stats.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return corpus, vocab


def _load_corpus_and_vocab(corpus_dir) -> tuple[Corpus, Vocabulary]:
    corpus = load_corpus(corpus_dir)
    vocab_path = Path(corpus_dir) / "vocab.txt"
    if not vocab_path.exists():
        raise DataError(f"{vocab_path} missing; run ingest or synth first")
    return corpus, load_vocab(vocab_path)


def _load_model(checkpoint: str, dropout_finetune: float | None = None):
    ckpt_path = Path(checkpoint)
    if not ckpt_path.exists():
        raise DataError(f"checkpoint {ckpt_path} not found; run pretrain or finetune first")
    config_path = ckpt_path.parent / "model_config.txt"
    if not config_path.exists():
        raise DataError(f"{config_path} missing next to checkpoint; "
                        "it is written by the pretrain and finetune commands")
    config = ModelConfig.load(config_path)
    if dropout_finetune is not None:
        config.dropout_finetune = dropout_finetune
    params = load_params(ckpt_path)
    return config, params


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    defaults = {"posts": "", "out": "", "min_freq": 2}
    opt = resolve_options(args, defaults)
    if not opt["posts"] or not opt["out"]:
        raise UsageError("ingest requires --posts and --out")
    write_run_config(opt["out"], "ingest", opt)
    questions, answers, stats = parse_posts(opt["posts"])
    print(f"parsed {stats.questions} questions, {stats.answers} answers "
          f"(dropped {stats.dropped_questions}/{stats.dropped_answers}, "
          f"skipped {stats.skipped_other} other rows)")
    _finalize_corpus_dir(questions, answers, opt["out"], opt["min_freq"])
    return EXIT_OK


def cmd_synth(args) -> int:
    defaults = {"out": "", "experts": 50, "topics": 5, "questions": 2000, "seed": 0,
                "vocab_seed": -1, "vote_rule": "skill", "vote_noise": 2.0, "min_freq": 2}
    opt = resolve_options(args, defaults)
    if not opt["out"]:
        raise UsageError("synth requires --out")
    write_run_config(opt["out"], "synth", opt)
    cfg = SyntheticConfig(
        experts=opt["experts"], topics=opt["topics"], questions=opt["questions"],
        seed=opt["seed"], vocab_seed=None if opt["vocab_seed"] < 0 else opt["vocab_seed"],
        vote_rule=opt["vote_rule"], vote_noise=opt["vote_noise"])
    questions, answers = generate_synthetic(cfg)
    _finalize_corpus_dir(questions, answers, opt["out"], opt["min_freq"])
    return EXIT_OK


_MODEL_DEFAULTS = {"d": 64, "heads": 4, "layers": 2, "ffn_mult": 4,
                   "max_len": 256, "title_cap": 16}


def _model_config_from(opt, corpus: Corpus, vocab: Vocabulary) -> ModelConfig:
    return ModelConfig(word_vocab=len(vocab), experts=corpus.num_experts,
                       d=opt["d"], heads=opt["heads"], layers=opt["layers"],
                       ffn_mult=opt["ffn_mult"], max_len=opt["max_len"],
                       title_cap=opt["title_cap"],
                       dropout_pretrain=opt.get("dropout", 0.2),
                       dropout_finetune=opt.get("dropout", 0.3))


def cmd_pretrain(args) -> int:
    defaults = {"corpus": "", "out": "", "steps": 2000, "batch_size": 16, "lr": 5e-5,
                "word_ratio": 0.15, "question_ratio": 0.15, "seed": 0,
                "checkpoint_interval": 500, "dropout": 0.2,
                "no_vote_lane": False, "no_vote_loss": False, "dump_examples": False,
                **_MODEL_DEFAULTS}
    opt = resolve_options(args, defaults)
    if not opt["corpus"] or not opt["out"]:
        raise UsageError("pretrain requires --corpus and --out")
    write_run_config(opt["out"], "pretrain", opt)
    corpus, vocab = _load_corpus_and_vocab(opt["corpus"])
    config = _model_config_from(opt, corpus, vocab)
    config.dropout_pretrain = opt["dropout"]
    builder = SequenceBuilder(vocab, corpus.questions, config.max_len, config.title_cap)
    examples, skipped = build_pretrain_examples(
        corpus, builder, opt["word_ratio"], opt["question_ratio"], opt["seed"])
    print(f"{len(examples)} pre-training examples ({skipped} cold pairs skipped)")
    if opt["dump_examples"]:
        save_examples(examples, Path(opt["out"]) / "pretrain_examples.jsonl")
    run = PretrainRun(steps=opt["steps"], batch_size=opt["batch_size"], lr=opt["lr"],
                      seed=opt["seed"], checkpoint_interval=opt["checkpoint_interval"],
                      use_vote_lane=not opt["no_vote_lane"],
                      enable_vote_loss=not opt["no_vote_loss"])
    result = pretrain_loop(examples, config, run, opt["out"])
    config.save(Path(opt["out"]) / "model_config.txt")
    figures.plot_pretrain_losses(result.log_path, Path(opt["out"]) / "pretrain_losses.png")
    for name, value in result.final_losses.items():
        print(f"{name} = {value:.4f}")
    if result.diverged:
        print(f"DIVERGED at step {result.counters.get('diverged_at_step')}; "
              f"last good checkpoint kept at {result.checkpoint_path}")
        return EXIT_NUMERIC
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    defaults = {"corpus": "", "out": "", "checkpoint": "", "lr": 5e-6, "epochs": 3,
                "k": 9, "patience": 3, "batch_size": 16, "seed": 0,
                "train_fraction": 1.0, "dropout": 0.3, **_MODEL_DEFAULTS}
    opt = resolve_options(args, defaults)
    if not opt["corpus"] or not opt["out"]:
        raise UsageError("finetune requires --corpus and --out")
    write_run_config(opt["out"], "finetune", opt)
    corpus, vocab = _load_corpus_and_vocab(opt["corpus"])
    if opt["checkpoint"]:
        config, params = _load_model(opt["checkpoint"], dropout_finetune=opt["dropout"])
    else:
        config = _model_config_from(opt, corpus, vocab)
        config.dropout_finetune = opt["dropout"]
        params = init_params(config, seed=opt["seed"])
    builder = SequenceBuilder(vocab, corpus.questions, config.max_len, config.title_cap)
    run = FinetuneRun(epochs=opt["epochs"], batch_instances=opt["batch_size"], lr=opt["lr"],
                      k=opt["k"], patience=opt["patience"], seed=opt["seed"],
                      train_fraction=opt["train_fraction"])
    result = finetune_loop(corpus, builder, params, config, run, opt["out"])
    config.save(Path(opt["out"]) / "model_config.txt")
    if result.epochs_run:
        figures.plot_finetune_curve(result.log_path, Path(opt["out"]) / "finetune_curve.png")
    print(f"best validation MRR = {result.best_val_mrr:.4f} "
          f"({result.epochs_run} epochs, {result.skipped_cold} cold positives skipped)")
    if result.diverged:
        print(f"DIVERGED; best checkpoint kept at {result.checkpoint_path}")
        return EXIT_NUMERIC
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    defaults = {"eval_corpus": "", "checkpoint": "", "checkpoint_corpus": "", "out": "",
                "section": "test", "seed": 0, "shuffle_candidates": False, "workers": 1}
    opt = resolve_options(args, defaults)
    if not opt["eval_corpus"] or not opt["checkpoint"] or not opt["out"]:
        raise UsageError("evaluate requires --eval-corpus, --checkpoint and --out")
    fingerprint = write_run_config(opt["out"], "evaluate", opt)
    corpus = load_corpus(opt["eval_corpus"])
    vocab_dir = opt["checkpoint_corpus"] or opt["eval_corpus"]
    vocab_path = Path(vocab_dir) / "vocab.txt"
    if not vocab_path.exists():
        raise DataError(f"{vocab_path} missing; run ingest or synth first")
    vocab = load_vocab(vocab_path)
    config, params = _load_model(opt["checkpoint"])
    if corpus.num_experts > config.experts:
        raise DataError(f"corpus has {corpus.num_experts} experts but the checkpoint's "
                        f"expert table holds {config.experts}; zero-shot corpora must not "
                        "exceed the training corpus expert count")
    builder = SequenceBuilder(vocab, corpus.questions, config.max_len, config.title_cap)
    report = evaluate(corpus, builder, params, config, opt["section"], seed=opt["seed"],
                      config_fingerprint=fingerprint,
                      shuffle_candidates=opt["shuffle_candidates"],
                      workers=opt["workers"])
    txt, tsv = save_report(report, opt["out"])
    figures.plot_rank_histogram([r.rank for r in report.rows],
                                Path(opt["out"]) / "report_ranks.png")
    for key, value in report.metrics.items():
        print(f"{key} = {value:.5f}")
    print(f"report: {txt} + {tsv}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    defaults = {"stage": "pretrain", "param": "word_ratio", "values": "", "corpus": "",
                "out": "", "checkpoint": "", "steps": 500, "batch_size": 16, "lr": 5e-5,
                "word_ratio": 0.15, "question_ratio": 0.15, "seed": 0, "epochs": 2,
                "k": 9, "patience": 3, "train_fraction": 1.0, **_MODEL_DEFAULTS}
    opt = resolve_options(args, defaults)
    if not opt["values"] or not opt["corpus"] or not opt["out"]:
        raise UsageError("sweep requires --values, --corpus and --out")
    values = [float(v) for v in opt["values"].split(",") if v.strip()]
    write_run_config(opt["out"], "sweep", opt)
    out = Path(opt["out"])
    corpus, vocab = _load_corpus_and_vocab(opt["corpus"])

    rows: list[tuple[float, dict[str, float]]] = []
    if opt["stage"] == "pretrain":
        if opt["param"] not in ("word_ratio", "question_ratio", "lr"):
            raise UsageError(f"pretrain sweep over '{opt['param']}' not supported")
        config = _model_config_from(opt, corpus, vocab)
        builder = SequenceBuilder(vocab, corpus.questions, config.max_len, config.title_cap)
        for value in values:
            knobs = {"word_ratio": opt["word_ratio"], "question_ratio": opt["question_ratio"],
                     "lr": opt["lr"], opt["param"]: value}
            examples, _ = build_pretrain_examples(
                corpus, builder, knobs["word_ratio"], knobs["question_ratio"], opt["seed"])
            run = PretrainRun(steps=opt["steps"], batch_size=opt["batch_size"],
                              lr=knobs["lr"], seed=opt["seed"],
                              checkpoint_interval=max(1, opt["steps"]))
            sub = out / f"{opt['param']}_{value:g}"
            result = pretrain_loop(examples, config, run, sub)
            config.save(sub / "model_config.txt")
            rows.append((value, dict(result.final_losses)))
    elif opt["stage"] == "finetune":
        if opt["param"] != "lr":
            raise UsageError("finetune sweep supports --param lr")
        if not opt["checkpoint"]:
            raise UsageError("finetune sweep requires --checkpoint")
        config, params = _load_model(opt["checkpoint"])
        builder = SequenceBuilder(vocab, corpus.questions, config.max_len, config.title_cap)
        run = FinetuneRun(epochs=opt["epochs"], batch_instances=opt["batch_size"],
                          k=opt["k"], patience=opt["patience"], seed=opt["seed"],
                          train_fraction=opt["train_fraction"])
        for entry in lr_sweep(corpus, builder, params, config, run, values, out):
            rows.append((entry["lr"], {"val_mrr": entry["val_mrr"]}))
    else:
        raise UsageError(f"unknown sweep stage: {opt['stage']}")

    metric_names = sorted(rows[0][1])
    with open(out / "sweep_summary.tsv", "w", encoding="utf-8") as fh:
        fh.write(opt["param"] + "\t" + "\t".join(metric_names) + "\n")
        for value, metrics in rows:
            fh.write(f"{value:g}\t" + "\t".join(repr(metrics[m]) for m in metric_names) + "\n")
    figures.plot_sweep([v for v, _ in rows],
                       {m: [r[1][m] for r in rows] for m in metric_names},
                       opt["param"], out / "sweep.png")
    print(f"swept {opt['stage']}:{opt['param']} over {len(values)} values; "
          f"summary: {out / 'sweep_summary.tsv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    defaults = {"d": 8, "heads": 2, "layers": 2, "seed": 0, "step": 1e-5,
                "tolerance": 1e-4, "inject_grad_error": False, "out": ""}
    opt = resolve_options(args, defaults)
    report = run_gradcheck(d=opt["d"], heads=opt["heads"], layers=opt["layers"],
                           seed=opt["seed"], h=opt["step"], tolerance=opt["tolerance"],
                           inject_error=opt["inject_grad_error"])
    text = "\n".join(report.lines()) + "\n"
    print(text, end="")
    if opt["out"]:
        write_run_config(opt["out"], "gradcheck", opt)
        (Path(opt["out"]) / "gradcheck.txt").write_text(text, encoding="utf-8")
    if not report.passed:
        raise GradCheckError(f"max relative error {max(report.pretrain_max_err, report.finetune_max_err):.3e} "
                             f"exceeds {report.tolerance:g}")
    return EXIT_OK


def cmd_casestudy(args) -> int:
    defaults = {"corpus": "", "checkpoint": "", "checkpoint_corpus": "", "out": "",
                "questions": "", "experts": ""}
    opt = resolve_options(args, defaults)
    if not opt["corpus"] or not opt["checkpoint"] or not opt["out"]:
        raise UsageError("casestudy requires --corpus, --checkpoint and --out")
    write_run_config(opt["out"], "casestudy", opt)
    corpus = load_corpus(opt["corpus"])
    vocab_dir = opt["checkpoint_corpus"] or opt["corpus"]
    vocab = load_vocab(Path(vocab_dir) / "vocab.txt")
    config, params = _load_model(opt["checkpoint"])
    builder = SequenceBuilder(vocab, corpus.questions, config.max_len, config.title_cap)

    if opt["questions"]:
        qids = [int(q) for q in opt["questions"].split(",")]
    else:
        qids = corpus.ranking_targets("test")[:3]
    if opt["experts"]:
        experts = [int(e) for e in opt["experts"].split(",")]
    else:
        experts = []
        for qid in qids:
            for e in corpus.question_answerers(qid):
                if e not in experts:
                    experts.append(e)
        experts = experts[:6]
    if not qids or not experts:
        raise DataError("casestudy has no questions or experts to score")
    text = score_matrix(corpus, builder, params, config, qids, experts)
    print(text, end="")
    (Path(opt["out"]) / "casestudy.txt").write_text(text, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="expertrank",
                     description="Expert finding with personalized pre-training")
    parser.add_argument("--version", action="version", version=f"expertrank {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--config", type=str, default=None,
                       help="key = value file; flags override it")
        return p

    p = add("ingest", cmd_ingest, "parse a Posts.xml dump into a corpus directory")
    _flag(p, "--posts", str, "Posts.xml path")
    _flag(p, "--out", str, "corpus output directory")
    _flag(p, "--min-freq", int, "vocabulary frequency cutoff")

    p = add("synth", cmd_synth, "generate a synthetic corpus with planted signal")
    _flag(p, "--out", str, "corpus output directory")
    _flag(p, "--experts", int, "number of experts")
    _flag(p, "--topics", int, "number of topics")
    _flag(p, "--questions", int, "number of questions")
    _flag(p, "--seed", int, "generator seed")
    _flag(p, "--vocab-seed", int, "word-pool seed (share across corpora); -1 = same as seed")
    _flag(p, "--vote-rule", str, "'skill' or 'token' (vote class planted on a title token)")
    _flag(p, "--vote-noise", float, "vote noise sigma (skill rule)")
    _flag(p, "--min-freq", int, "vocabulary frequency cutoff")

    p = add("pretrain", cmd_pretrain, "pre-train the encoder on a corpus")
    _flag(p, "--corpus", str, "corpus directory")
    _flag(p, "--out", str, "output directory")
    _flag(p, "--steps", int, "optimization steps")
    _flag(p, "--batch-size", int, "sequences per step")
    _flag(p, "--lr", float, "learning rate")
    _flag(p, "--word-ratio", float, "word masking ratio")
    _flag(p, "--question-ratio", float, "history-question masking ratio")
    _flag(p, "--seed", int, "run seed")
    _flag(p, "--checkpoint-interval", int, "steps between checkpoints")
    _flag(p, "--dropout", float, "pre-training dropout")
    _switch(p, "--no-vote-lane", "ablation: zero the vote input lane")
    _switch(p, "--no-vote-loss", "ablation: drop the vote prediction task")
    _switch(p, "--dump-examples", "serialize assembled examples for inspection")
    for name, val in _MODEL_DEFAULTS.items():
        _flag(p, "--" + name.replace("_", "-"), int, f"model {name} (default {val})")

    p = add("finetune", cmd_finetune, "fine-tune a checkpoint as a ranker")
    _flag(p, "--corpus", str, "corpus directory")
    _flag(p, "--out", str, "output directory")
    _flag(p, "--checkpoint", str, "pre-trained checkpoint (omit for random init)")
    _flag(p, "--lr", float, "learning rate")
    _flag(p, "--epochs", int, "max epochs")
    _flag(p, "--k", int, "negative samples per instance")
    _flag(p, "--patience", int, "early-stopping patience (validation evals)")
    _flag(p, "--batch-size", int, "instances per step")
    _flag(p, "--seed", int, "run seed")
    _flag(p, "--train-fraction", float, "use only the earliest fraction of train questions")
    _flag(p, "--dropout", float, "fine-tuning dropout")
    for name, val in _MODEL_DEFAULTS.items():
        _flag(p, "--" + name.replace("_", "-"), int, f"model {name} for random init")

    p = add("evaluate", cmd_evaluate, "rank candidates on a split and report metrics")
    _flag(p, "--eval-corpus", str, "corpus to evaluate on")
    _flag(p, "--checkpoint", str, "fine-tuned checkpoint")
    _flag(p, "--checkpoint-corpus", str, "corpus the checkpoint was trained on (zero-shot)")
    _flag(p, "--out", str, "output directory")
    _flag(p, "--section", str, "train | validation | test")
    _flag(p, "--seed", int, "candidate sampling seed")
    _flag(p, "--workers", int, "parallel workers for per-question scoring")
    _switch(p, "--shuffle-candidates", "shuffle candidate order for unbiased tie stats")

    p = add("sweep", cmd_sweep, "run a stage across a list of parameter values")
    _flag(p, "--stage", str, "pretrain | finetune")
    _flag(p, "--param", str, "parameter to sweep")
    _flag(p, "--values", str, "comma-separated values")
    _flag(p, "--corpus", str, "corpus directory")
    _flag(p, "--out", str, "output directory")
    _flag(p, "--checkpoint", str, "starting checkpoint (finetune sweeps)")
    _flag(p, "--steps", int, "pretrain steps per value")
    _flag(p, "--batch-size", int, "batch size")
    _flag(p, "--lr", float, "fixed lr (when not swept)")
    _flag(p, "--word-ratio", float, "fixed word ratio (when not swept)")
    _flag(p, "--question-ratio", float, "fixed question ratio (when not swept)")
    _flag(p, "--seed", int, "run seed")
    _flag(p, "--epochs", int, "finetune epochs per value")
    _flag(p, "--k", int, "negatives per instance")
    _flag(p, "--patience", int, "early-stopping patience")
    _flag(p, "--train-fraction", float, "earliest fraction of train questions")
    for name, val in _MODEL_DEFAULTS.items():
        _flag(p, "--" + name.replace("_", "-"), int, f"model {name}")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient verification")
    _flag(p, "--d", int, "hidden size")
    _flag(p, "--heads", int, "attention heads")
    _flag(p, "--layers", int, "encoder layers")
    _flag(p, "--seed", int, "fixture seed")
    _flag(p, "--step", float, "finite-difference step h")
    _flag(p, "--tolerance", float, "max relative error allowed")
    _flag(p, "--out", str, "optional output directory for the report")
    _switch(p, "--inject-grad-error", "negative control: corrupt one gradient path")

    p = add("casestudy", cmd_casestudy, "dump a question x expert score matrix")
    _flag(p, "--corpus", str, "corpus directory")
    _flag(p, "--checkpoint", str, "fine-tuned checkpoint")
    _flag(p, "--checkpoint-corpus", str, "corpus the checkpoint was trained on")
    _flag(p, "--out", str, "output directory")
    _flag(p, "--questions", str, "comma-separated question ids (default: first test targets)")
    _flag(p, "--experts", str, "comma-separated dense expert ids (default: their answerers)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericsError, GradCheckError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
