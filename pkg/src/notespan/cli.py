"""Command-line pipeline: corpus generation, training, inference, scoring.

Every command validates its inputs before writing anything, funnels all
randomness through --seed, and drops a manifest (config snapshot, input and
output paths, output checksums, wall time) beside its outputs. Artifact files
contain no timestamps, so reruns with equal seeds are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import __version__
from .batching import (
    PLANNERS, PlanError, benchmark, format_benchmark_table, synthetic_lengths,
)
from .data import (
    DataError, IntegrityError, NoteCorpus, ParseError, SpanSet, Vocabulary,
    build_vocabulary, load_corpus, save_annotations, save_corpus, tokenize,
)
from .evaluation import micro_f1
from .model import (
    ConfigError, EncoderModel, LengthError, ModelConfig, load_checkpoint,
    save_checkpoint,
)
from .synthetic import make_synthetic_corpus
from .tensor import ContractError, ShapeError
from .train import (
    DivergenceError, LeakageError, TrainConfig, build_task, evaluate_task,
    finetune_span, predict_spans, pretrain_mlm, pseudo_label_regimen,
    split_note_ids,
)

USER_ERRORS = (ParseError, IntegrityError, DataError, ConfigError, LengthError,
               ContractError, ShapeError, PlanError, LeakageError,
               DivergenceError, ValueError, OSError)

CORPUS_FILES = ("notes.tsv", "features.tsv", "annotations.tsv")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                    inputs: list[Path], outputs: list[Path], wall_s: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": sorted(str(p) for p in inputs),
        "outputs": {str(p): _sha256(p) for p in sorted(outputs)},
        "wall_time_s": round(wall_s, 3),
    }
    path = out_dir / f"{command}-manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _corpus_paths(corpus_dir: str) -> tuple[Path, Path, Path]:
    base = Path(corpus_dir)
    paths = tuple(base / name for name in CORPUS_FILES)
    for p in paths:
        if not p.exists():
            raise DataError(f"missing corpus file: {p}")
    return paths


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(args, **overrides) -> TrainConfig:
    """Config file first, then explicit CLI flags on top."""
    values = {}
    if args.config:
        values.update(TrainConfig.from_file(args.config).to_dict())
    values["seed"] = args.seed
    for key, flag in [("learning_rate", "lr"), ("epochs", "epochs"),
                      ("batch_size", "batch_size"), ("mask_prob", "mask_prob"),
                      ("pseudo_fraction", "pseudo_fraction"),
                      ("pseudo_epochs", "pseudo_epochs"),
                      ("optimizer", "optimizer")]:
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    values.update(overrides)
    return TrainConfig.from_mapping(values)


def _model_config(args, vocab: Vocabulary) -> ModelConfig:
    return ModelConfig(
        vocab_size=len(vocab), d_model=args.d_model, n_heads=args.n_heads,
        n_layers=args.n_layers, max_seq_len=args.max_seq_len,
        attention_mode=args.attention_mode,
        mask_token_id=vocab.mask_id, pad_token_id=vocab.pad_id)


def _read_note_ids(path: str) -> list[int]:
    return [int(line) for line in Path(path).read_text().split()]


def _annotated_pairs(corpus: NoteCorpus):
    by_key = {}
    for ann in corpus.annotations:
        by_key[(ann.note_id, ann.feature_id)] = ann
    return by_key


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    start = time.perf_counter()
    out = _out_dir(args)
    corpus = make_synthetic_corpus(
        n_labeled=args.notes, n_unlabeled=args.unlabeled, seed=args.seed,
        vocab_size=args.vocab_size, n_cases=args.cases,
        features_per_case=args.features_per_case,
        min_words=args.min_words, max_words=args.max_words)
    paths = [out / name for name in CORPUS_FILES]
    save_corpus(corpus, *paths)
    _write_manifest(out, "gen-synthetic", {
        "notes": args.notes, "unlabeled": args.unlabeled,
        "vocab_size": args.vocab_size, "cases": args.cases,
        "features_per_case": args.features_per_case,
        "min_words": args.min_words, "max_words": args.max_words,
    }, args.seed, [], paths, time.perf_counter() - start)
    print(f"wrote {len(corpus.notes)} notes, {len(corpus.features)} features, "
          f"{len(corpus.annotations)} annotations to {out}")
    return 0


def cmd_pretrain(args) -> int:
    start = time.perf_counter()
    paths = _corpus_paths(args.corpus)
    corpus = load_corpus(*paths)
    out = _out_dir(args)
    vocab = build_vocabulary(corpus)
    config = _train_config(args)
    model_config = _model_config(args, vocab)
    model, report = pretrain_mlm(corpus, config, vocab=vocab,
                                 model_config=model_config)
    ckpt = out / "model.ckpt"
    vocab_path = out / "vocab.txt"
    report_path = out / "pretrain-report.jsonl"
    save_checkpoint(model, ckpt)
    vocab.save(vocab_path)
    report_path.write_text(report.to_jsonl(), encoding="utf-8")
    _write_manifest(out, "pretrain", config.to_dict(), args.seed, list(paths),
                    [ckpt, vocab_path, report_path], time.perf_counter() - start)
    print(report.summary())
    return 0


def _load_model_and_vocab(args) -> tuple[EncoderModel, Vocabulary]:
    model = load_checkpoint(args.model)
    vocab = Vocabulary.load(args.vocab)
    if len(vocab) != model.config.vocab_size:
        raise DataError(f"vocabulary size {len(vocab)} does not match "
                        f"checkpoint vocab_size {model.config.vocab_size}")
    return model, vocab


def cmd_finetune(args) -> int:
    start = time.perf_counter()
    paths = _corpus_paths(args.corpus)
    corpus = load_corpus(*paths)
    model, vocab = _load_model_and_vocab(args)
    out = _out_dir(args)
    config = _train_config(args)

    annotated_ids = sorted({a.note_id for a in corpus.annotations})
    if not annotated_ids:
        raise DataError("corpus has no annotations to fine-tune on")
    train_ids, val_ids = split_note_ids(annotated_ids, args.val_notes, args.seed)
    val_set = set(val_ids)
    train_task = build_task(corpus, [a for a in corpus.annotations
                                     if a.note_id not in val_set],
                            vocab, model.config.max_seq_len)
    val_task = build_task(corpus, [a for a in corpus.annotations
                                   if a.note_id in val_set],
                          vocab, model.config.max_seq_len) if val_ids else None
    model, report = finetune_span(model, train_task, config, val_task=val_task)

    ckpt = out / "model.ckpt"
    report_path = out / "finetune-report.jsonl"
    val_path = out / "val-notes.txt"
    save_checkpoint(model, ckpt)
    report_path.write_text(report.to_jsonl(), encoding="utf-8")
    val_path.write_text("".join(f"{i}\n" for i in val_ids), encoding="utf-8")
    _write_manifest(out, "finetune", config.to_dict(), args.seed,
                    [*paths, Path(args.model), Path(args.vocab)],
                    [ckpt, report_path, val_path], time.perf_counter() - start)
    print(report.summary())
    return 0


def cmd_pseudolabel(args) -> int:
    start = time.perf_counter()
    paths = _corpus_paths(args.corpus)
    corpus = load_corpus(*paths)
    model, vocab = _load_model_and_vocab(args)
    out = _out_dir(args)
    config = _train_config(args)

    val_ids = _read_note_ids(args.val_notes_file) if args.val_notes_file else []
    val_set = set(val_ids)
    labeled_ids = {a.note_id for a in corpus.annotations}
    unlabeled_ids = sorted(set(corpus.notes) - labeled_ids - val_set)
    if not unlabeled_ids:
        raise DataError("corpus has no unlabeled notes for pseudo labeling")
    train_task = build_task(corpus, [a for a in corpus.annotations
                                     if a.note_id not in val_set],
                            vocab, model.config.max_seq_len)
    val_task = build_task(corpus, [a for a in corpus.annotations
                                   if a.note_id in val_set],
                          vocab, model.config.max_seq_len) if val_ids else None
    model, report, pseudo = pseudo_label_regimen(
        model, train_task, corpus, unlabeled_ids, config, vocab, val_task=val_task)

    ckpt = out / "model.ckpt"
    pseudo_path = out / "pseudo-annotations.tsv"
    report_path = out / "pseudolabel-report.jsonl"
    save_checkpoint(model, ckpt)
    save_annotations(pseudo, pseudo_path)
    report_path.write_text(report.to_jsonl(), encoding="utf-8")
    inputs = [*paths, Path(args.model), Path(args.vocab)]
    if args.val_notes_file:
        inputs.append(Path(args.val_notes_file))
    _write_manifest(out, "pseudolabel", config.to_dict(), args.seed, inputs,
                    [ckpt, pseudo_path, report_path], time.perf_counter() - start)
    print(report.summary())
    return 0


def cmd_infer(args) -> int:
    start = time.perf_counter()
    paths = _corpus_paths(args.corpus)
    corpus = load_corpus(*paths)
    model, vocab = _load_model_and_vocab(args)
    out = _out_dir(args)

    note_ids = set(_read_note_ids(args.notes_file)) if args.notes_file \
        else set(corpus.notes)
    pairs = [(ann.note_id, ann.feature_id) for ann in corpus.annotations
             if ann.note_id in note_ids]
    if not pairs:
        raise DataError("no (note, feature) pairs to infer on")
    predictions = []
    from .data import AnnotatedExample
    from .data import pack_example
    for note_id, feature_id in sorted(set(pairs)):
        note = corpus.notes[note_id]
        feature = corpus.features[feature_id]
        ex = pack_example(note, feature, SpanSet(), vocab, model.config.max_seq_len)
        spans = predict_spans(model, ex, note.text, threshold=args.threshold)
        predictions.append(AnnotatedExample(note_id, feature_id, spans,
                                            provenance="pseudo"))
    pred_path = out / "pred-annotations.tsv"
    save_annotations(predictions, pred_path)
    inputs = [*paths, Path(args.model), Path(args.vocab)]
    if args.notes_file:
        inputs.append(Path(args.notes_file))
    _write_manifest(out, "infer", {"threshold": args.threshold}, args.seed,
                    inputs, [pred_path], time.perf_counter() - start)
    print(f"wrote {len(predictions)} predictions to {pred_path}")
    return 0


def cmd_eval(args) -> int:
    start = time.perf_counter()
    notes_path = Path(args.notes)
    gold_path, pred_path = Path(args.gold), Path(args.pred)

    note_lengths = {}
    if notes_path.exists():
        from .data import _rows, _unescape, _int_field
        for lineno, (nid, _cid, text) in _rows(notes_path, 3):
            note_lengths[_int_field(notes_path, lineno, nid, "note_id")] = \
                len(_unescape(text))

    def read_annotations(path: Path) -> dict[tuple[int, int], SpanSet]:
        out = {}
        from .data import _rows, _int_field
        for lineno, (nid, fid, location) in _rows(path, 3):
            note_id = _int_field(path, lineno, nid, "note_id")
            feature_id = _int_field(path, lineno, fid, "feature_id")
            spans = SpanSet.from_location(location)
            if note_lengths and spans.max_end() > note_lengths.get(note_id, 0):
                raise DataError(f"{path}:{lineno}: span beyond end of note {note_id}")
            out[(note_id, feature_id)] = spans
        return out

    gold = read_annotations(gold_path)
    pred = read_annotations(pred_path)
    keys = sorted(set(gold) | set(pred))
    pairs = [(gold.get(k, SpanSet()), pred.get(k, SpanSet())) for k in keys]
    overall = micro_f1(pairs)

    by_feature: dict[int, list] = {}
    for key, pair in zip(keys, pairs):
        by_feature.setdefault(key[1], []).append(pair)
    breakdown = {str(fid): micro_f1(fpairs).to_dict()
                 for fid, fpairs in sorted(by_feature.items())}
    report = {"overall": overall.to_dict(), "per_feature": breakdown,
              "pairs": len(pairs)}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    print(text, end="")
    out = _out_dir(args)
    report_path = out / "eval-report.json"
    report_path.write_text(text, encoding="utf-8")
    inputs = [gold_path, pred_path]
    if notes_path.exists():
        inputs.append(notes_path)
    _write_manifest(out, "eval", {"gold": str(gold_path), "pred": str(pred_path)},
                    args.seed, inputs, [report_path], time.perf_counter() - start)
    return 0


def cmd_bench(args) -> int:
    start = time.perf_counter()
    inputs = []
    if args.corpus:
        paths = _corpus_paths(args.corpus)
        corpus = load_corpus(*paths)
        inputs = list(paths)
        lengths = [max(1, len(tokenize(note.text)))
                   for note in sorted(corpus.notes.values(), key=lambda n: n.note_id)]
        lengths = [min(l, args.max_len) for l in lengths]
    else:
        lengths = synthetic_lengths(args.n, seed=args.seed, max_len=args.max_len)

    model = None
    token_rows = None
    if args.model:
        model = load_checkpoint(args.model)
        inputs.append(Path(args.model))
        import numpy as np
        rng = np.random.default_rng(args.seed)
        lengths = [min(l, model.config.max_seq_len) for l in lengths]
        low = 4  # first non-special vocabulary id
        high = max(low + 1, model.config.vocab_size)
        token_rows = [[int(t) for t in rng.integers(low, high, size=l)]
                      for l in lengths]

    strategies = args.strategies.split(",")
    for s in strategies:
        if s not in PLANNERS:
            raise PlanError(f"unknown strategy {s!r} (choose from {PLANNERS})")
    results = benchmark(lengths, strategies=strategies, batch_size=args.batch_size,
                        token_budget=args.token_budget, bucket_width=args.bucket_width,
                        cost_per_token=args.cost_per_token, model=model,
                        token_id_rows=token_rows)
    print(format_benchmark_table(results))
    out = _out_dir(args)
    record_path = out / "bench.jsonl"
    record_path.write_text(
        "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in results),
        encoding="utf-8")
    _write_manifest(out, "bench", {
        "strategies": strategies, "batch_size": args.batch_size,
        "token_budget": args.token_budget, "bucket_width": args.bucket_width,
        "cost_per_token": args.cost_per_token, "n": len(lengths),
    }, args.seed, inputs, [record_path], time.perf_counter() - start)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="seed for every stochastic choice (default 0)")
    common.add_argument("--config", default=None,
                        help="flat key=value training config file")
    common.add_argument("--out", default="out",
                        help="output directory (default ./out)")

    train_flags = argparse.ArgumentParser(add_help=False)
    train_flags.add_argument("--epochs", type=int, default=None)
    train_flags.add_argument("--lr", type=float, default=None)
    train_flags.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    train_flags.add_argument("--mask-prob", dest="mask_prob", type=float, default=None)
    train_flags.add_argument("--pseudo-fraction", dest="pseudo_fraction",
                             type=float, default=None)
    train_flags.add_argument("--pseudo-epochs", dest="pseudo_epochs",
                             type=int, default=None)
    train_flags.add_argument("--optimizer", choices=("adam", "sgd"), default=None)

    model_inputs = argparse.ArgumentParser(add_help=False)
    model_inputs.add_argument("--model", required=True, help="model checkpoint")
    model_inputs.add_argument("--vocab", required=True, help="vocabulary file")

    parser = argparse.ArgumentParser(
        prog="notespan",
        description="Span extraction for clinical-style patient notes.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common],
                       help="emit a seeded synthetic corpus with exact gold spans")
    p.add_argument("--notes", type=int, default=250, help="labeled notes")
    p.add_argument("--unlabeled", type=int, default=0, help="extra unlabeled notes")
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=200)
    p.add_argument("--cases", type=int, default=10)
    p.add_argument("--features-per-case", dest="features_per_case", type=int, default=3)
    p.add_argument("--min-words", dest="min_words", type=int, default=8)
    p.add_argument("--max-words", dest="max_words", type=int, default=18)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("pretrain", parents=[common, train_flags],
                       help="masked-token pretraining over corpus notes")
    p.add_argument("--corpus", required=True, help="directory with the corpus files")
    p.add_argument("--d-model", dest="d_model", type=int, default=64)
    p.add_argument("--n-heads", dest="n_heads", type=int, default=4)
    p.add_argument("--n-layers", dest="n_layers", type=int, default=2)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int, default=128)
    p.add_argument("--attention-mode", dest="attention_mode",
                   choices=("standard", "disentangled"), default="disentangled")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common, train_flags, model_inputs],
                       help="span fine-tuning with a held-out note split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--val-notes", dest="val_notes", type=int, default=50,
                   help="how many annotated notes to hold out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("pseudolabel", parents=[common, train_flags, model_inputs],
                       help="pseudo-label regimen: generate, train on a subset, re-fit")
    p.add_argument("--corpus", required=True)
    p.add_argument("--val-notes-file", dest="val_notes_file", default=None,
                   help="file of held-out note ids (one per line)")
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("infer", parents=[common, model_inputs],
                       help="write predicted annotations for (note, feature) pairs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--notes-file", dest="notes_file", default=None,
                   help="restrict to note ids listed in this file")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common],
                       help="micro character F1 of predictions against gold")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--notes", default="", help="notes file for span bounds checking")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common],
                       help="compare batching strategies; measure wall time with --model")
    p.add_argument("--n", type=int, default=1000, help="synthetic sequence count")
    p.add_argument("--corpus", default=None, help="use corpus note lengths instead")
    p.add_argument("--model", default=None, help="checkpoint for wall-time runs")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    p.add_argument("--token-budget", dest="token_budget", type=int, default=None)
    p.add_argument("--bucket-width", dest="bucket_width", type=int, default=8)
    p.add_argument("--cost-per-token", dest="cost_per_token", type=float, default=1.0)
    p.add_argument("--max-len", dest="max_len", type=int, default=120)
    p.add_argument("--strategies", default="naive,dynamic,bucketed")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USER_ERRORS as err:
        print(f"notespan {args.command}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
