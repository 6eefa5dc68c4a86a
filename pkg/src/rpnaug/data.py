"""Tokenizer, vocabulary, TSV ingestion and a synthetic separable corpus."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rpnaug.errors import ConfigError, DataError, ParseError
from rpnaug.tensor import RngStream

log = logging.getLogger(__name__)

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
DEFAULT_MAX_LEN = 64

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, keep each punctuation mark as a token."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens=()):
        self.itos: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self.stoi: dict[str, int] = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def build(cls, token_lists, max_size=None, min_freq=1) -> "Vocabulary":
        """Most frequent tokens first; ties broken by first appearance."""
        counts: dict[str, int] = {}
        for tokens in token_lists:
            for tok in tokens:
                counts[tok] = counts.get(tok, 0) + 1
        ranked = sorted(counts, key=lambda t: -counts[t])  # stable sort keeps first-seen order
        ranked = [t for t in ranked if counts[t] >= min_freq and t not in (PAD_TOKEN, UNK_TOKEN)]
        if max_size is not None:
            ranked = ranked[: max(0, max_size - 2)]
        return cls(ranked)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(tok, UNK) for tok in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.itos[2:]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(line for line in text.split("\n") if line)


@dataclass(frozen=True)
class TokenSequence:
    token_ids: tuple
    label: int
    raw_text: str


@dataclass
class LabeledDataset:
    sequences: list
    num_classes: int
    split: str = "train"
    vocab: Vocabulary | None = None
    malformed: list = field(default_factory=list)

    def __len__(self):
        return len(self.sequences)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels(), minlength=self.num_classes)


def make_sequence(text, label, vocab, max_len=DEFAULT_MAX_LEN) -> TokenSequence:
    ids = vocab.encode(tokenize(text))[:max_len]
    return TokenSequence(tuple(ids), int(label), text)


def pad_batch(sequences, max_len) -> np.ndarray:
    """Right-pad (and truncate) token ids into a ``(batch, max_len)`` int array."""
    out = np.zeros((len(sequences), max_len), dtype=np.int64)
    for row, seq in enumerate(sequences):
        ids = seq.token_ids[:max_len]
        out[row, : len(ids)] = ids
    return out


@dataclass(frozen=True)
class TsvSchema:
    """Columns are 0-based indices, or header names when ``has_header``."""

    text_column: int | str = 0
    label_column: int | str = 1
    has_header: bool = True


def _resolve_column(col, header, path):
    if isinstance(col, int):
        return col
    if isinstance(col, str) and col.isdigit():
        return int(col)
    if header is None:
        raise ConfigError(f"{path}: column {col!r} given by name but the file has no header")
    try:
        return header.index(col)
    except ValueError:
        raise ConfigError(f"{path}: header {header} has no column {col!r}") from None


def read_tsv_records(path, schema: TsvSchema, strict=True):
    """Return ``(records, malformed_lines)`` with records as ``(text, label)``."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    records, malformed = [], []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = None
        text_col = label_col = None
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and schema.has_header:
                header = row
                continue
            if text_col is None:
                text_col = _resolve_column(schema.text_column, header, path)
                label_col = _resolve_column(schema.label_column, header, path)
            if not row or row == [""]:
                continue
            problem = None
            if len(row) <= max(text_col, label_col):
                problem = f"expected at least {max(text_col, label_col) + 1} columns, found {len(row)}"
            else:
                try:
                    label = int(row[label_col])
                    if label < 0:
                        problem = f"negative label {label}"
                except ValueError:
                    problem = f"label {row[label_col]!r} is not an integer"
            if problem:
                if strict:
                    raise ParseError(f"{path}:{lineno}: {problem}", location=lineno)
                malformed.append(lineno)
                continue
            records.append((row[text_col], label))
    if malformed:
        log.warning("%s: skipped %d malformed rows (lines %s)", path, len(malformed), malformed[:10])
    return records, malformed


def load_tsv(path, schema: TsvSchema = TsvSchema(), vocab: Vocabulary | None = None,
             split="train", strict=True, max_len=DEFAULT_MAX_LEN, num_classes=None,
             vocab_size=None) -> LabeledDataset:
    """Load a labelled TSV file.  Builds a vocabulary from it when none is given."""
    records, malformed = read_tsv_records(path, schema, strict=strict)
    if vocab is None:
        vocab = Vocabulary.build((tokenize(t) for t, _ in records), max_size=vocab_size)
    sequences = [make_sequence(t, y, vocab, max_len) for t, y in records]
    if num_classes is None:
        num_classes = max((y for _, y in records), default=-1) + 1
    bad = [s.label for s in sequences if s.label >= num_classes]
    if bad:
        raise DataError(f"{path}: label {bad[0]} outside [0, {num_classes})")
    return LabeledDataset(sequences, num_classes, split, vocab, malformed)


def read_manifest(path) -> dict:
    """Parse a ``key=value`` manifest; split paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    entries = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key=value", location=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
    for split in ("train", "dev", "test"):
        if split in entries:
            entries[split] = str((path.parent / entries[split]).resolve())
    return entries


def load_splits(paths: dict, schema: TsvSchema, max_len=DEFAULT_MAX_LEN, vocab_size=None,
                strict=True) -> dict:
    """Load train/dev/test; the vocabulary comes from train only.

    Train rows whose text also occurs in dev or test are dropped so splits
    stay disjoint.
    """
    if "train" not in paths:
        raise ConfigError("a train split path is required")
    held_out = {}
    for split in ("dev", "test"):
        if paths.get(split):
            held_out[split] = read_tsv_records(paths[split], schema, strict=strict)
    held_texts = {t for recs, _ in held_out.values() for t, _ in recs}
    train_records, train_bad = read_tsv_records(paths["train"], schema, strict=strict)
    kept = [(t, y) for t, y in train_records if t not in held_texts]
    if len(kept) != len(train_records):
        log.info("dropped %d train rows duplicated in held-out splits", len(train_records) - len(kept))
    vocab = Vocabulary.build((tokenize(t) for t, _ in kept), max_size=vocab_size)
    all_labels = [y for _, y in kept] + [y for recs, _ in held_out.values() for _, y in recs]
    num_classes = max(all_labels, default=-1) + 1
    out = {"train": LabeledDataset([make_sequence(t, y, vocab, max_len) for t, y in kept],
                                   num_classes, "train", vocab, train_bad)}
    for split, (recs, bad) in held_out.items():
        out[split] = LabeledDataset([make_sequence(t, y, vocab, max_len) for t, y in recs],
                                    num_classes, split, vocab, bad)
    return out


def marker_tokens(vocab_size: int, num_classes: int) -> list[list[int]]:
    """Token ids reserved as class markers by ``synth_dataset``."""
    usable = vocab_size - 2
    per_class = usable // (2 * num_classes)
    if num_classes < 2 or per_class < 1:
        raise ConfigError(
            f"cannot fit {num_classes} marker sets plus filler into vocab_size={vocab_size}")
    return [list(range(2 + c * per_class, 2 + (c + 1) * per_class)) for c in range(num_classes)]


def synth_dataset(num_samples, vocab_size, seq_len, num_classes, rng: RngStream,
                  split="train", max_markers=2) -> LabeledDataset:
    """Separable corpus: each class owns disjoint marker tokens.

    Every sample carries 1..max_markers markers of its own class and filler
    tokens otherwise.  Token ``k`` is spelled ``w{k}`` so raw text re-encodes
    to the same ids through the attached vocabulary.
    """
    if num_samples <= 0 or seq_len <= 0:
        raise ConfigError("num_samples and seq_len must be positive")
    markers = marker_tokens(vocab_size, num_classes)
    first_filler = 2 + num_classes * len(markers[0])
    gen = rng.generator()
    vocab = Vocabulary(f"w{k}" for k in range(2, vocab_size))
    labels = gen.permutation(np.arange(num_samples) % num_classes)
    sequences = []
    for label in labels:
        length = int(gen.integers(max(1, (seq_len + 1) // 2), seq_len + 1))
        ids = gen.integers(first_filler, vocab_size, size=length)
        n_mark = int(gen.integers(1, min(max_markers, length) + 1))
        spots = gen.choice(length, size=n_mark, replace=False)
        ids[spots] = gen.choice(markers[label], size=n_mark)
        text = " ".join(f"w{k}" for k in ids)
        sequences.append(TokenSequence(tuple(int(k) for k in ids), int(label), text))
    return LabeledDataset(sequences, num_classes, split, vocab)
