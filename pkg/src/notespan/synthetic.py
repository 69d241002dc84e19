"""Seeded synthetic corpus with rule-based gold spans.

Notes are random sentences over a fixed 200-word vocabulary; each feature is
a single vocabulary word assigned to a case, and the gold spans for a
(note, feature) pair are exactly the token occurrences of that word in the
note. Ground truth is therefore exact and machine-checkable, and a model that
learns "flag the tokens matching the feature word" solves the task.

Notes beyond the labeled count are emitted without annotations; they form the
unlabeled pool for pseudo labeling.
"""

from __future__ import annotations

import numpy as np

from .data import AnnotatedExample, Feature, NoteCorpus, PatientNote, SpanSet, tokenize

_CONSONANTS = "bcdfglmnprstvz"
_VOWELS = "aeiou"
_SYLLABLES = [c + v for c in _CONSONANTS for v in _VOWELS]


def word_list(n: int) -> list[str]:
    """First n two-syllable pseudo-words, deterministic and distinct."""
    if n > len(_SYLLABLES) ** 2:
        raise ValueError(f"cannot build {n} distinct words")
    return [_SYLLABLES[i // len(_SYLLABLES)] + _SYLLABLES[i % len(_SYLLABLES)]
            for i in range(n)]


def occurrences_as_spans(text: str, word: str) -> SpanSet:
    """Char spans of every whole-token occurrence of `word` in `text`.

    Back-to-back occurrences separated by a single space merge into one span,
    matching how the evaluator decodes adjacent positive tokens.
    """
    spans: list[tuple[int, int]] = []
    for t in tokenize(text):
        if t.text != word:
            continue
        if spans and t.start - spans[-1][1] == 1 and text[spans[-1][1]].isspace():
            spans[-1] = (spans[-1][0], t.end)
        else:
            spans.append((t.start, t.end))
    return SpanSet(spans)


def make_synthetic_corpus(n_labeled: int = 250, n_unlabeled: int = 0,
                          seed: int = 7, vocab_size: int = 200,
                          n_cases: int = 10, features_per_case: int = 3,
                          min_words: int = 8, max_words: int = 18) -> NoteCorpus:
    """Generate notes, per-case feature words, and exact gold annotations."""
    if n_labeled <= 0:
        raise ValueError("need at least one labeled note")
    if features_per_case * n_cases > vocab_size:
        raise ValueError("not enough vocabulary for the requested features")
    rng = np.random.default_rng(seed)
    words = word_list(vocab_size)

    corpus = NoteCorpus()
    feature_words: dict[int, list[Feature]] = {}
    picked = rng.choice(vocab_size, size=n_cases * features_per_case, replace=False)
    fid = 1
    for case_id in range(n_cases):
        feats = []
        for k in range(features_per_case):
            word = words[int(picked[case_id * features_per_case + k])]
            feature = Feature(fid, case_id, word)
            corpus.features[fid] = feature
            feats.append(feature)
            fid += 1
        feature_words[case_id] = feats

    total = n_labeled + n_unlabeled
    for i in range(total):
        note_id = i + 1
        case_id = i % n_cases
        length = int(rng.integers(min_words, max_words + 1))
        body = [words[int(w)] for w in rng.integers(0, vocab_size, size=length)]
        # Inject each case feature word a few times in most notes, so
        # positive labels are common but not universal.
        for feature in feature_words[case_id]:
            if rng.random() < 0.85:
                for _ in range(int(rng.integers(2, 5))):
                    body.insert(int(rng.integers(0, len(body) + 1)),
                                feature.feature_text)
        text = " ".join(body)
        corpus.notes[note_id] = PatientNote(note_id, case_id, text)
        if i < n_labeled:
            for feature in feature_words[case_id]:
                corpus.annotations.append(AnnotatedExample(
                    note_id, feature.feature_id,
                    occurrences_as_spans(text, feature.feature_text)))
    return corpus


def make_bigram_corpus(n_notes: int = 30, cycle: int = 10, length: int = 12,
                       seed: int = 0) -> NoteCorpus:
    """Notes following a deterministic next-word rule, for MLM learnability.

    Each note walks the word cycle w0 -> w1 -> ... starting at a random
    offset, so any masked token is fully determined by its neighbors.
    """
    rng = np.random.default_rng(seed)
    words = word_list(cycle)
    corpus = NoteCorpus()
    for i in range(n_notes):
        start = int(rng.integers(cycle))
        body = [words[(start + j) % cycle] for j in range(length)]
        corpus.notes[i + 1] = PatientNote(i + 1, 0, " ".join(body))
    return corpus
