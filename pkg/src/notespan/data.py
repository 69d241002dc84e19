"""Corpus model: notes, features, span annotations, tokenization, masking.

Char spans are half-open [start, end) offsets into a note's text, counted in
characters (not bytes). The corpus lives in three UTF-8 tab-separated files:

    notes.tsv        note_id <TAB> case_id <TAB> text
    features.tsv     feature_id <TAB> case_id <TAB> feature_text
    annotations.tsv  note_id <TAB> feature_id <TAB> location

`location` is a semicolon-separated list of "start end" pairs ("5 9;12 15"),
empty for an empty gold set. Tab/newline/backslash inside text columns are
escaped as \\t, \\n, \\\\.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class ParseError(ValueError):
    """Malformed corpus row; message carries file and line number."""


class IntegrityError(ValueError):
    """Dangling or duplicate identifier in a corpus."""


class DataError(ValueError):
    """Annotation content inconsistent with its note."""


# ---------------------------------------------------------------------------
# Spans
# ---------------------------------------------------------------------------

class SpanSet:
    """Sorted, disjoint, half-open character intervals."""

    __slots__ = ("spans",)

    def __init__(self, spans: Iterable[tuple[int, int]] = ()):
        cleaned = []
        for start, end in spans:
            start, end = int(start), int(end)
            if start < 0 or start >= end:
                raise DataError(f"invalid span [{start}, {end})")
            cleaned.append((start, end))
        cleaned.sort()
        merged: list[tuple[int, int]] = []
        for start, end in cleaned:
            if merged and start <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], end))
            else:
                merged.append((start, end))
        self.spans = tuple(merged)

    def __iter__(self):
        return iter(self.spans)

    def __len__(self):
        return len(self.spans)

    def __eq__(self, other):
        return isinstance(other, SpanSet) and self.spans == other.spans

    def __hash__(self):
        return hash(self.spans)

    def __repr__(self):
        return f"SpanSet({list(self.spans)})"

    def char_count(self) -> int:
        return sum(end - start for start, end in self.spans)

    def char_set(self) -> set[int]:
        out: set[int] = set()
        for start, end in self.spans:
            out.update(range(start, end))
        return out

    def max_end(self) -> int:
        return self.spans[-1][1] if self.spans else 0

    def to_location(self) -> str:
        return ";".join(f"{s} {e}" for s, e in self.spans)

    @classmethod
    def from_location(cls, location: str) -> "SpanSet":
        location = location.strip()
        if not location:
            return cls()
        pairs = []
        for chunk in location.split(";"):
            parts = chunk.split()
            if len(parts) != 2 or not all(p.lstrip("-").isdigit() for p in parts):
                raise DataError(f"bad location field {location!r}")
            pairs.append((int(parts[0]), int(parts[1])))
        return cls(pairs)


# ---------------------------------------------------------------------------
# Corpus records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatientNote:
    note_id: int
    case_id: int
    text: str


@dataclass(frozen=True)
class Feature:
    feature_id: int
    case_id: int
    feature_text: str


@dataclass(frozen=True)
class AnnotatedExample:
    note_id: int
    feature_id: int
    gold: SpanSet
    provenance: str = "human"  # or "pseudo"


@dataclass
class NoteCorpus:
    notes: dict[int, PatientNote] = field(default_factory=dict)
    features: dict[int, Feature] = field(default_factory=dict)
    annotations: list[AnnotatedExample] = field(default_factory=list)

    def features_for_case(self, case_id: int) -> list[Feature]:
        return [f for f in self.features.values() if f.case_id == case_id]


# ---------------------------------------------------------------------------
# Tokenizer and vocabulary
# ---------------------------------------------------------------------------

class Token(NamedTuple):
    text: str
    start: int
    end: int


_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
MASK_TOKEN = "<mask>"
SEP_TOKEN = "<sep>"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, MASK_TOKEN, SEP_TOKEN)


def tokenize(text: str) -> list[Token]:
    """Split on whitespace and punctuation; every non-space char lands in
    exactly one token's [start, end) range."""
    return [Token(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


class Vocabulary:
    """Word-level vocabulary with fixed special-token ids."""

    def __init__(self, words: Iterable[str]):
        uniq = sorted(set(words) - set(SPECIAL_TOKENS))
        self.id_to_token = list(SPECIAL_TOKENS) + uniq
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK_TOKEN]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[MASK_TOKEN]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP_TOKEN]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        unk = self.unk_id
        return [self.token_to_id.get(t, unk) for t in tokens]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise ParseError(f"{path}: not a vocabulary file")
        vocab = cls([])
        vocab.id_to_token = lines
        vocab.token_to_id = {t: i for i, t in enumerate(lines)}
        return vocab


def build_vocabulary(corpus: NoteCorpus) -> Vocabulary:
    """Vocabulary over all note and feature tokens, deterministically ordered."""
    words: set[str] = set()
    for note in corpus.notes.values():
        words.update(t.text for t in tokenize(note.text))
    for feat in corpus.features.values():
        words.update(t.text for t in tokenize(feat.feature_text))
    return Vocabulary(words)


# ---------------------------------------------------------------------------
# Span <-> token-label projection
# ---------------------------------------------------------------------------

def project_spans_to_labels(spans: SpanSet, ranges: Sequence[tuple[int, int]],
                            text_length: int | None = None,
                            note_id: int | None = None) -> list[int]:
    """1 for every token whose char range overlaps a gold span by >= 1 char."""
    if text_length is not None and spans.max_end() > text_length:
        raise DataError(f"span beyond end of note {note_id}: "
                        f"{spans.max_end()} > {text_length}")
    labels = []
    for start, end in ranges:
        hit = any(s < end and start < e for s, e in spans)
        labels.append(1 if hit else 0)
    return labels


def labels_to_spans(labels: Sequence[int],
                    ranges: Sequence[tuple[int, int]]) -> SpanSet:
    """Union of char ranges of positive tokens, normalized."""
    if len(labels) != len(ranges):
        raise DataError("labels and ranges differ in length")
    return SpanSet(r for lab, r in zip(labels, ranges) if lab)


# ---------------------------------------------------------------------------
# MLM masking
# ---------------------------------------------------------------------------

def mask_for_mlm(token_ids: Sequence[int], mask_prob: float, seed: int,
                 mask_token_id: int, pad_token_id: int):
    """Independently mask each non-pad token with probability mask_prob.

    Returns (masked_ids, targets) where targets is a list of
    (position, original_id). Deterministic for a given seed. Selected tokens
    are always replaced by the mask token (no keep/corrupt split).
    """
    if not (0.0 < mask_prob < 1.0):
        raise ValueError(f"mask_prob must be in (0, 1), got {mask_prob}")
    rng = np.random.default_rng(seed)
    draws = rng.random(len(token_ids))
    masked = list(token_ids)
    targets: list[tuple[int, int]] = []
    for pos, (tok, draw) in enumerate(zip(token_ids, draws)):
        if tok == pad_token_id:
            continue
        if draw < mask_prob:
            masked[pos] = mask_token_id
            targets.append((pos, tok))
    return masked, targets


# ---------------------------------------------------------------------------
# Fine-tuning input packing
# ---------------------------------------------------------------------------

@dataclass
class TokenizedExample:
    """One (note, feature) pair packed as [feature tokens] <sep> [note tokens].

    char_ranges is aligned with token_ids; entries are None for the feature
    prefix and separator, and note-text offsets for note tokens. Labels and
    loss positions cover note tokens only.
    """
    note_id: int
    feature_id: int
    token_ids: list[int]
    char_ranges: list[tuple[int, int] | None]
    labels: list[int]
    provenance: str = "human"

    def __post_init__(self):
        if len(self.token_ids) != len(self.char_ranges) or \
                len(self.token_ids) != len(self.labels):
            raise DataError("token_ids, char_ranges and labels must align")
        note_ranges = [r for r in self.char_ranges if r is not None]
        for prev, cur in zip(note_ranges, note_ranges[1:]):
            if cur[0] < prev[1]:
                raise DataError("note token ranges must ascend without overlap")

    @property
    def length(self) -> int:
        return len(self.token_ids)

    def note_positions(self) -> list[int]:
        return [i for i, r in enumerate(self.char_ranges) if r is not None]

    def note_ranges(self) -> list[tuple[int, int]]:
        return [r for r in self.char_ranges if r is not None]


def pack_example(note: PatientNote, feature: Feature, gold: SpanSet,
                 vocab: Vocabulary, max_seq_len: int,
                 provenance: str = "human") -> TokenizedExample:
    """Tokenize, prepend the feature text with a separator, project labels."""
    feat_tokens = tokenize(feature.feature_text)
    note_tokens = tokenize(note.text)
    budget = max_seq_len - len(feat_tokens) - 1
    if budget <= 0:
        raise DataError(f"feature {feature.feature_id} leaves no room for note tokens")
    note_tokens = note_tokens[:budget]
    ranges = [(t.start, t.end) for t in note_tokens]
    note_labels = project_spans_to_labels(gold, ranges, text_length=len(note.text),
                                          note_id=note.note_id)
    ids = (vocab.encode([t.text for t in feat_tokens]) + [vocab.sep_id]
           + vocab.encode([t.text for t in note_tokens]))
    char_ranges: list[tuple[int, int] | None] = \
        [None] * (len(feat_tokens) + 1) + ranges
    labels = [0] * (len(feat_tokens) + 1) + note_labels
    return TokenizedExample(note.note_id, feature.feature_id, ids, char_ranges,
                            labels, provenance=provenance)


# ---------------------------------------------------------------------------
# Corpus file IO
# ---------------------------------------------------------------------------

def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            if nxt == "t":
                out.append("\t"); i += 2; continue
            if nxt == "n":
                out.append("\n"); i += 2; continue
            if nxt == "\\":
                out.append("\\"); i += 2; continue
        out.append(ch)
        i += 1
    return "".join(out)


def _rows(path: Path, n_cols: int):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != n_cols:
                raise ParseError(
                    f"{path}:{lineno}: expected {n_cols} tab-separated columns, "
                    f"got {len(parts)}")
            yield lineno, parts


def _int_field(path: Path, lineno: int, value: str, name: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: {name} is not an integer: {value!r}") from None


def load_corpus(notes_path, features_path, annotations_path,
                provenance: str = "human") -> NoteCorpus:
    """Read and cross-validate the three-file corpus format."""
    notes_path, features_path, annotations_path = (
        Path(notes_path), Path(features_path), Path(annotations_path))
    corpus = NoteCorpus()
    for lineno, (nid, cid, text) in _rows(notes_path, 3):
        note_id = _int_field(notes_path, lineno, nid, "note_id")
        if note_id in corpus.notes:
            raise IntegrityError(f"duplicate note_id {note_id}")
        text = _unescape(text)
        if not text:
            raise ParseError(f"{notes_path}:{lineno}: empty note text")
        corpus.notes[note_id] = PatientNote(
            note_id, _int_field(notes_path, lineno, cid, "case_id"), text)
    for lineno, (fid, cid, ftext) in _rows(features_path, 3):
        feature_id = _int_field(features_path, lineno, fid, "feature_id")
        if feature_id in corpus.features:
            raise IntegrityError(f"duplicate feature_id {feature_id}")
        corpus.features[feature_id] = Feature(
            feature_id, _int_field(features_path, lineno, cid, "case_id"),
            _unescape(ftext))
    for lineno, (nid, fid, location) in _rows(annotations_path, 3):
        note_id = _int_field(annotations_path, lineno, nid, "note_id")
        feature_id = _int_field(annotations_path, lineno, fid, "feature_id")
        if note_id not in corpus.notes:
            raise IntegrityError(
                f"{annotations_path}:{lineno}: unknown note_id {note_id}")
        if feature_id not in corpus.features:
            raise IntegrityError(
                f"{annotations_path}:{lineno}: unknown feature_id {feature_id}")
        try:
            gold = SpanSet.from_location(location)
        except DataError as err:
            raise ParseError(f"{annotations_path}:{lineno}: {err}") from None
        if gold.max_end() > len(corpus.notes[note_id].text):
            raise DataError(
                f"{annotations_path}:{lineno}: span beyond end of note {note_id}")
        corpus.annotations.append(
            AnnotatedExample(note_id, feature_id, gold, provenance=provenance))
    return corpus


def save_corpus(corpus: NoteCorpus, notes_path, features_path, annotations_path) -> None:
    with open(notes_path, "w", encoding="utf-8") as fh:
        for note in sorted(corpus.notes.values(), key=lambda n: n.note_id):
            fh.write(f"{note.note_id}\t{note.case_id}\t{_escape(note.text)}\n")
    with open(features_path, "w", encoding="utf-8") as fh:
        for feat in sorted(corpus.features.values(), key=lambda f: f.feature_id):
            fh.write(f"{feat.feature_id}\t{feat.case_id}\t{_escape(feat.feature_text)}\n")
    save_annotations(corpus.annotations, annotations_path)


def save_annotations(annotations: Iterable[AnnotatedExample], path) -> None:
    rows = sorted(annotations, key=lambda a: (a.note_id, a.feature_id))
    with open(path, "w", encoding="utf-8") as fh:
        for ann in rows:
            fh.write(f"{ann.note_id}\t{ann.feature_id}\t{ann.gold.to_location()}\n")
