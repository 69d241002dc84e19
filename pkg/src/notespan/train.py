"""Training: MLM pretraining, span fine-tuning, and the pseudo-label regimen.

All stochastic choices (shuffles, masking, pseudo-subset selection) derive
from a single config seed, so two runs with equal seeds produce identical
parameters. Losses are averaged over contributing tokens within each batch,
never summed, so batch geometry does not rescale gradients.
"""

from __future__ import annotations

import json
import time
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import (
    AnnotatedExample, NoteCorpus, SpanSet, TokenizedExample, Vocabulary,
    build_vocabulary, labels_to_spans, mask_for_mlm, pack_example, tokenize,
)
from .evaluation import MetricResult, decode_spans, micro_f1
from .model import EncoderModel, ModelConfig
from .tensor import ContractError, Tensor, backward, fresh_tape


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class LeakageError(ValueError):
    """Unlabeled pool overlaps the validation notes."""


class NoMaskedTokens(Exception):
    """Signal: a sequence had nothing to predict; the trainer skips it."""


# ---------------------------------------------------------------------------
# Config and report
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 8
    mask_prob: float = 0.15
    pseudo_fraction: float = 0.5
    pseudo_epochs: int = 1
    seed: int = 0
    optimizer: str = "adam"  # "sgd" for the plain gradient-descent path

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0 or self.pseudo_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if not (0.0 < self.mask_prob < 1.0):
            raise ValueError(f"mask_prob must be in (0, 1), got {self.mask_prob}")
        if not (0.0 < self.pseudo_fraction <= 1.0):
            raise ValueError(
                f"pseudo_fraction must be in (0, 1], got {self.pseudo_fraction}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, value in mapping.items():
            if key not in types:
                raise ValueError(f"unknown training option {key!r}")
            if key == "optimizer":
                kwargs[key] = str(value)
            elif key in ("learning_rate", "mask_prob", "pseudo_fraction"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Flat key=value file; '#' starts a comment, blank lines ignored."""
        mapping = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
        return cls.from_mapping(mapping)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    loss: float
    examples: int


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    final_metric: float | None = None
    wall_time_s: float = 0.0

    def epoch_losses(self, stage: str | None = None) -> list[float]:
        return [r.loss for r in self.records if stage is None or r.stage == stage]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"stage": r.stage, "epoch": r.epoch, "loss": r.loss,
                             "examples": r.examples}, sort_keys=True)
                 for r in self.records]
        return "\n".join(lines) + ("\n" if lines else "")

    def summary(self) -> str:
        lines = []
        for r in self.records:
            lines.append(f"[{r.stage}] epoch {r.epoch}: "
                         f"loss {r.loss:.6f} over {r.examples} examples")
        if self.final_metric is not None:
            lines.append(f"held-out micro-F1: {self.final_metric:.4f}")
        lines.append(f"wall time: {self.wall_time_s:.1f}s")
        return "\n".join(lines)

    def extend(self, other: "TrainReport") -> None:
        self.records.extend(other.records)
        self.wall_time_s += other.wall_time_s
        if other.final_metric is not None:
            self.final_metric = other.final_metric


def stage_rng(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Deterministic per-stage RNG stream derived from the run seed."""
    return np.random.default_rng(
        (int(seed), zlib.crc32(label.encode("utf-8")), *[int(i) for i in indices]))


def split_note_ids(note_ids: Iterable[int], val_count: int,
                   seed: int) -> tuple[list[int], list[int]]:
    """Seeded train/validation split over note ids (sorted output)."""
    ids = sorted(set(note_ids))
    if not (0 <= val_count < len(ids)):
        raise ValueError(f"val_count {val_count} out of range for {len(ids)} notes")
    order = stage_rng(seed, "val-split").permutation(len(ids))
    val = {ids[i] for i in order[:val_count]}
    return sorted(set(ids) - val), sorted(val)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(model: EncoderModel, config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(model.parameters(), config.learning_rate)
    return Adam(model.parameters(), config.learning_rate)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, labels: Sequence[int],
                    mask: Sequence[bool] | None = None) -> Tensor:
    """Mean binary cross-entropy over unmasked tokens, from raw logits.

    Computed in the stable form max(x,0) - x*y + log(1 + exp(-|x|)); the last
    term is -log(sigmoid(|x|)) so the whole expression stays differentiable
    through the tape.
    """
    y = np.asarray(labels, dtype=np.float64)
    if logits.shape != y.shape:
        raise ContractError(f"bce_with_logits: {logits.shape} logits vs "
                            f"{y.shape} labels")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("bce_with_logits: labels must be 0 or 1")
    keep = np.ones_like(y) if mask is None else \
        np.asarray(mask, dtype=np.float64)
    if keep.shape != y.shape:
        raise ContractError("bce_with_logits: mask length differs from labels")
    count = keep.sum()
    if count == 0:
        raise ContractError("bce_with_logits: no tokens to average over")
    per_token = T.sub(T.sub(T.relu(logits), T.mul(logits, Tensor(y))),
                      T.log(T.sigmoid(T.absolute(logits))))
    return T.scale(T.total(T.mul(per_token, Tensor(keep))), 1.0 / count)


def mlm_loss(logits: Tensor, targets: Sequence[tuple[int, int]]) -> Tensor:
    """Mean -log P(original token) at the masked positions."""
    if not targets:
        raise NoMaskedTokens
    n, vocab = logits.shape
    onehot = np.zeros((n, vocab))
    for pos, tok in targets:
        if not (0 <= pos < n and 0 <= tok < vocab):
            raise ContractError(f"mlm_loss: target ({pos}, {tok}) out of range")
        onehot[pos, tok] = 1.0
    picked = T.total(T.mul(T.log_softmax_rows(logits), Tensor(onehot)))
    return T.scale(picked, -1.0 / len(targets))


# ---------------------------------------------------------------------------
# Task bundles
# ---------------------------------------------------------------------------

@dataclass
class SpanTask:
    """Packed (note, feature) examples plus the gold spans and note texts
    needed to score predictions."""
    examples: list[TokenizedExample]
    gold: dict[tuple[int, int], SpanSet]
    texts: dict[int, str]

    def note_ids(self) -> set[int]:
        return {ex.note_id for ex in self.examples}


def build_task(corpus: NoteCorpus, annotations: Iterable[AnnotatedExample],
               vocab: Vocabulary, max_seq_len: int) -> SpanTask:
    examples, gold, texts = [], {}, {}
    for ann in annotations:
        note = corpus.notes[ann.note_id]
        feature = corpus.features[ann.feature_id]
        examples.append(pack_example(note, feature, ann.gold, vocab, max_seq_len,
                                     provenance=ann.provenance))
        gold[(ann.note_id, ann.feature_id)] = ann.gold
        texts[ann.note_id] = note.text
    return SpanTask(examples, gold, texts)


def predict_spans(model: EncoderModel, example: TokenizedExample,
                  text: str, threshold: float = 0.5) -> SpanSet:
    """Frozen-model span prediction for one packed example."""
    probs = model.span_probabilities(example.token_ids)
    positions = example.note_positions()
    return decode_spans([probs[i] for i in positions], example.note_ranges(),
                        threshold=threshold, text=text)


def evaluate_task(model: EncoderModel, task: SpanTask,
                  threshold: float = 0.5) -> MetricResult:
    pairs = []
    for ex in task.examples:
        pred = predict_spans(model, ex, task.texts[ex.note_id], threshold)
        pairs.append((task.gold[(ex.note_id, ex.feature_id)], pred))
    return micro_f1(pairs)


# ---------------------------------------------------------------------------
# MLM pretraining
# ---------------------------------------------------------------------------

def pretrain_mlm(corpus: NoteCorpus, config: TrainConfig,
                 vocab: Vocabulary | None = None,
                 model_config: ModelConfig | None = None,
                 ) -> tuple[EncoderModel, TrainReport]:
    """Masked-token pretraining over the corpus note texts."""
    if not corpus.notes:
        raise ValueError("pretrain_mlm: empty corpus")
    start = time.perf_counter()
    vocab = vocab or build_vocabulary(corpus)
    if model_config is None:
        model_config = ModelConfig(vocab_size=len(vocab),
                                   mask_token_id=vocab.mask_id,
                                   pad_token_id=vocab.pad_id)
    model = EncoderModel(model_config, seed=config.seed)
    sequences = []
    for note in sorted(corpus.notes.values(), key=lambda n: n.note_id):
        ids = vocab.encode([t.text for t in tokenize(note.text)])
        if ids:
            sequences.append(ids[:model_config.max_seq_len])
    if not sequences:
        raise ValueError("pretrain_mlm: no tokenizable notes")
    optimizer = make_optimizer(model, config)
    report = TrainReport()
    for epoch in range(config.epochs):
        order = stage_rng(config.seed, "mlm-shuffle", epoch).permutation(len(sequences))
        epoch_loss = 0.0
        epoch_targets = 0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            masked_batch = []
            for seq_index in batch:
                seed = int(stage_rng(config.seed, "mlm-mask", epoch, seq_index)
                           .integers(2 ** 31))
                masked, targets = mask_for_mlm(
                    sequences[seq_index], config.mask_prob, seed,
                    mask_token_id=model_config.mask_token_id,
                    pad_token_id=model_config.pad_token_id)
                if targets:
                    masked_batch.append((masked, targets))
            total_targets = sum(len(t) for _, t in masked_batch)
            if total_targets == 0:
                continue
            for masked, targets in masked_batch:
                with fresh_tape():
                    logits = model.mlm_logits(model.encode(masked))
                    loss = mlm_loss(logits, targets)
                    weighted = T.scale(loss, len(targets) / total_targets)
                    backward(weighted)
                epoch_loss += loss.item() * len(targets)
                epoch_targets += len(targets)
            optimizer.step()
            optimizer.zero_grad()
        mean_loss = epoch_loss / max(epoch_targets, 1)
        if not np.isfinite(mean_loss):
            raise DivergenceError(
                f"MLM loss diverged at epoch {epoch}: {mean_loss}")
        report.records.append(EpochRecord("pretrain", epoch, mean_loss, len(sequences)))
    report.wall_time_s = time.perf_counter() - start
    return model, report


# ---------------------------------------------------------------------------
# Span fine-tuning
# ---------------------------------------------------------------------------

def finetune_span(model: EncoderModel, task: SpanTask, config: TrainConfig,
                  val_task: SpanTask | None = None, stage: str = "finetune",
                  epochs: int | None = None) -> tuple[EncoderModel, TrainReport]:
    """Optimize mean BCE over note-token labels; returns the trained model
    (updated in place) and a per-epoch report."""
    start = time.perf_counter()
    report = TrainReport()
    epochs = config.epochs if epochs is None else epochs
    if epochs == 0 or not task.examples:
        report.wall_time_s = time.perf_counter() - start
        if val_task is not None:
            report.final_metric = evaluate_task(model, val_task).micro_f1
        return model, report
    optimizer = make_optimizer(model, config)
    examples = task.examples
    for epoch in range(epochs):
        order = stage_rng(config.seed, stage + "-shuffle", epoch) \
            .permutation(len(examples))
        epoch_loss = 0.0
        epoch_tokens = 0
        for lo in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[lo:lo + config.batch_size]]
            batch_tokens = sum(len(ex.note_positions()) for ex in batch)
            if batch_tokens == 0:
                continue
            for ex in batch:
                positions = ex.note_positions()
                if not positions:
                    continue
                keep = [r is not None for r in ex.char_ranges]
                with fresh_tape():
                    logits = model.span_logits(model.encode(ex.token_ids))
                    loss = bce_with_logits(logits, ex.labels, mask=keep)
                    backward(T.scale(loss, len(positions) / batch_tokens))
                epoch_loss += loss.item() * len(positions)
                epoch_tokens += len(positions)
            optimizer.step()
            optimizer.zero_grad()
        mean_loss = epoch_loss / max(epoch_tokens, 1)
        if not np.isfinite(mean_loss):
            raise DivergenceError(f"span loss diverged at epoch {epoch}: {mean_loss}")
        report.records.append(EpochRecord(stage, epoch, mean_loss, len(examples)))
    if val_task is not None:
        report.final_metric = evaluate_task(model, val_task).micro_f1
    report.wall_time_s = time.perf_counter() - start
    return model, report


# ---------------------------------------------------------------------------
# Pseudo labeling
# ---------------------------------------------------------------------------

def generate_pseudo_labels(model: EncoderModel, corpus: NoteCorpus,
                           note_ids: Iterable[int], vocab: Vocabulary,
                           ) -> list[AnnotatedExample]:
    """Direct single-model predictions over (note, case feature) pairs.

    A token is labeled positive iff its predicted probability exceeds 0.5
    (a probability of exactly 0.5 stays negative); positive token ranges are
    merged into spans. No averaging or ensembling is involved.
    """
    out = []
    for note_id in sorted(note_ids):
        note = corpus.notes[note_id]
        for feature in sorted(corpus.features_for_case(note.case_id),
                              key=lambda f: f.feature_id):
            ex = pack_example(note, feature, SpanSet(), vocab,
                              model.config.max_seq_len, provenance="pseudo")
            probs = model.span_probabilities(ex.token_ids)
            positions = ex.note_positions()
            labels = [1 if probs[i] > 0.5 else 0 for i in positions]
            spans = labels_to_spans(labels, ex.note_ranges())
            out.append(AnnotatedExample(note_id, feature.feature_id, spans,
                                        provenance="pseudo"))
    return out


def pseudo_label_regimen(model: EncoderModel, labeled_task: SpanTask,
                         corpus: NoteCorpus, unlabeled_note_ids: Iterable[int],
                         config: TrainConfig, vocab: Vocabulary,
                         val_task: SpanTask | None = None,
                         ) -> tuple[EncoderModel, TrainReport, list[AnnotatedExample]]:
    """Generate pseudo labels, train briefly on a random half, then re-fit.

    Stages: (1) pseudo labels for every unlabeled (note, feature) pair;
    (2) exactly config.pseudo_epochs epochs on a seeded uniform random
    config.pseudo_fraction subset of them; (3) fine-tuning on the original
    labeled data. The unlabeled pool must not contain validation notes.
    """
    unlabeled = sorted(set(unlabeled_note_ids))
    if val_task is not None:
        overlap = set(unlabeled) & val_task.note_ids()
        if overlap:
            raise LeakageError(
                f"unlabeled pool shares notes with validation set: {sorted(overlap)}")
    report = TrainReport()
    start = time.perf_counter()

    pseudo = generate_pseudo_labels(model, corpus, unlabeled, vocab)

    take = round(len(pseudo) * config.pseudo_fraction)
    picked_idx = stage_rng(config.seed, "pseudo-subset").permutation(len(pseudo))[:take]
    subset = [pseudo[i] for i in sorted(picked_idx)]
    if subset and config.pseudo_epochs > 0:
        pseudo_task = build_task(corpus, subset, vocab, model.config.max_seq_len)
        _, stage_report = finetune_span(model, pseudo_task, config,
                                        stage="pseudo", epochs=config.pseudo_epochs)
        report.extend(stage_report)

    _, refit_report = finetune_span(model, labeled_task, config,
                                    val_task=val_task, stage="refit")
    report.extend(refit_report)
    report.wall_time_s = time.perf_counter() - start
    return model, report, pseudo
