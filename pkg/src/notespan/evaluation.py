"""Span decoding from per-token probabilities and micro-averaged character F1.

Precision, recall and F1 are pooled over the characters of every (gold, pred)
pair: TP is the size of the intersection of gold and predicted character sets.
Conventions for empty sides: no predicted chars -> precision 0; no gold chars
-> recall 0; when both pools are empty the comparison is vacuously perfect
and F1 is 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .data import DataError, SpanSet


@dataclass(frozen=True)
class MetricResult:
    micro_precision: float
    micro_recall: float
    micro_f1: float
    tp_chars: int
    pred_chars: int
    gold_chars: int

    def to_dict(self) -> dict:
        return {
            "micro_precision": self.micro_precision,
            "micro_recall": self.micro_recall,
            "micro_f1": self.micro_f1,
            "tp_chars": self.tp_chars,
            "pred_chars": self.pred_chars,
            "gold_chars": self.gold_chars,
        }


def decode_spans(probabilities: Sequence[float],
                 char_ranges: Sequence[tuple[int, int]],
                 threshold: float = 0.5,
                 text: str | None = None) -> SpanSet:
    """Char ranges of tokens above threshold, merged across 1-char gaps.

    Overlapping and touching ranges always merge; ranges separated by exactly
    one character merge when that character is whitespace. Without the note
    text the gap character is assumed to be whitespace, which holds for any
    tokenizer that puts every non-space character inside a token.
    """
    if len(probabilities) != len(char_ranges):
        raise DataError("probabilities and char_ranges differ in length")
    if not (0.0 < threshold < 1.0):
        raise DataError(f"threshold must be in (0, 1), got {threshold}")
    positive = sorted(r for p, r in zip(probabilities, char_ranges) if p > threshold)
    merged: list[tuple[int, int]] = []
    for start, end in positive:
        if merged:
            prev_start, prev_end = merged[-1]
            gap = start - prev_end
            bridge = gap <= 0 or (
                gap == 1 and (text is None or text[prev_end].isspace()))
            if bridge:
                merged[-1] = (prev_start, max(prev_end, end))
                continue
        merged.append((start, end))
    return SpanSet(merged)


def _as_span_pairs(spans) -> tuple[tuple[int, int], ...]:
    if isinstance(spans, SpanSet):
        return spans.spans
    pairs = tuple((int(s), int(e)) for s, e in spans)
    for (s1, e1), (s2, e2) in zip(pairs, pairs[1:]):
        if s2 < e1:
            raise DataError(f"overlapping spans {['%d %d' % p for p in pairs]}; "
                            "normalize before scoring")
    for s, e in pairs:
        if s >= e or s < 0:
            raise DataError(f"invalid span [{s}, {e})")
    return pairs


def micro_f1(pairs: Iterable[tuple[SpanSet, SpanSet]]) -> MetricResult:
    """Pooled char-level precision/recall/F1 over (gold, pred) pairs."""
    tp = n_pred = n_gold = 0
    for gold, pred in pairs:
        gold_spans = _as_span_pairs(gold)
        pred_spans = _as_span_pairs(pred)
        n_gold += sum(e - s for s, e in gold_spans)
        n_pred += sum(e - s for s, e in pred_spans)
        # Both sides are sorted and disjoint; sweep for intersection size.
        gi = pi = 0
        while gi < len(gold_spans) and pi < len(pred_spans):
            gs, ge = gold_spans[gi]
            ps, pe = pred_spans[pi]
            lo, hi = max(gs, ps), min(ge, pe)
            if lo < hi:
                tp += hi - lo
            if ge <= pe:
                gi += 1
            else:
                pi += 1
    if n_pred == 0 and n_gold == 0:
        return MetricResult(1.0, 1.0, 1.0, 0, 0, 0)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricResult(precision, recall, f1, tp, n_pred, n_gold)
