"""Tokenisation, GLUE-layout ingestion and synthetic desk-scale tasks."""

from __future__ import annotations

import csv
import enum
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import EmptyFile, InvalidSize, MissingColumn
from .model import CLS_ID, MASK_ID, PAD_ID, SEP_ID, UNK_ID

log = logging.getLogger(__name__)

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[MASK]", "[SEP]")


class Vocab:
    """Lower-cased whitespace word vocabulary with reserved ids 0-4."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        for tok in tokens:
            if tok not in SPECIAL_TOKENS:
                self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 2) -> Vocab:
        counts = Counter(tok for text in texts for tok in tokenize(text))
        kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
        return cls(kept)

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(tok, UNK_ID) for tok in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids)

    def encode_pair(self, text_a: str, text_b: str | None, max_len: int) -> list[int]:
        """[CLS] a [SEP] (b [SEP]), truncating the longer segment first."""
        a = self.encode(text_a)
        b = self.encode(text_b) if text_b is not None else None
        budget = max_len - (3 if b is not None else 2)
        if budget < 0:
            raise ValueError("max_len too small for special tokens")
        if b is None:
            a = a[:budget]
        else:
            while len(a) + len(b) > budget:
                if len(a) >= len(b):
                    a.pop()
                else:
                    b.pop()
        ids = [CLS_ID, *a, SEP_ID]
        if b is not None:
            ids += [*b, SEP_ID]
        return ids


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Example(NamedTuple):
    text_a: str
    text_b: str | None
    label: int


@dataclass
class Dataset:
    train: list[Example]
    dev: list[Example] = field(default_factory=list)
    label_space: list[str] = field(default_factory=lambda: ["0", "1"])
    name: str = ""
    skipped_rows: int = 0

    def __post_init__(self):
        n = len(self.label_space)
        for ex in (*self.train, *self.dev):
            if not 0 <= ex.label < n:
                raise ValueError(f"label {ex.label} outside label space {self.label_space}")

    def texts(self) -> list[str]:
        out = []
        for ex in self.train:
            out.append(ex.text_a)
            if ex.text_b is not None:
                out.append(ex.text_b)
        return out


@dataclass(frozen=True)
class TsvSchema:
    text_a: str = "sentence"
    label: str = "label"
    text_b: str | None = None


def ingest_tsv(path, schema: TsvSchema, label_space: Sequence[str] | None = None) -> Dataset:
    """Read a GLUE-layout TSV (header row, tab separated) into the train split.

    Rows with a wrong field count, an empty text or an empty label are
    skipped with a logged warning; the count lands in ``skipped_rows``.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE))
    if not rows:
        raise EmptyFile(f"{path} is empty")
    header = rows[0]
    wanted = [c for c in (schema.text_a, schema.text_b, schema.label) if c is not None]
    missing = [c for c in wanted if c not in header]
    if missing:
        raise MissingColumn(f"{path}: missing column(s) {missing}")
    col = {name: header.index(name) for name in wanted}

    parsed: list[tuple[str, str | None, str]] = []
    skipped = 0
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            skipped += 1
            log.warning("%s:%d: expected %d fields, got %d; skipped", path, lineno, len(header), len(row))
            continue
        a = row[col[schema.text_a]].strip()
        b = row[col[schema.text_b]].strip() if schema.text_b else None
        y = row[col[schema.label]].strip()
        if not a or not y or (schema.text_b and not b):
            skipped += 1
            log.warning("%s:%d: empty text or label; skipped", path, lineno)
            continue
        parsed.append((a, b, y))

    space = list(label_space) if label_space is not None else sorted({y for _, _, y in parsed})
    index = {y: i for i, y in enumerate(space)}
    examples = []
    for a, b, y in parsed:
        if y not in index:
            skipped += 1
            log.warning("%s: label %r not in label space; skipped", path, y)
            continue
        examples.append(Example(a, b, index[y]))
    return Dataset(examples, [], space, name=path.stem, skipped_rows=skipped)


def load_task_files(train_path, dev_path, schema: TsvSchema, label_space: Sequence[str] | None = None) -> Dataset:
    train = ingest_tsv(train_path, schema, label_space)
    dev = ingest_tsv(dev_path, schema, train.label_space)
    return Dataset(train.train, dev.train, train.label_space, train.name, train.skipped_rows + dev.skipped_rows)


# -- synthetic tasks --------------------------------------------------------


class TaskKind(str, enum.Enum):
    KEYWORD = "KEYWORD"
    PARITY = "PARITY"
    PAIR_MATCH = "PAIR_MATCH"


@dataclass(frozen=True)
class SynthParams:
    min_len: int = 6
    max_len: int = 12
    trigger: int = 0  # KEYWORD: word index of the trigger
    marked: int = 4  # PARITY: words w0..w{marked-1} count towards parity
    overlap_k: int = 1  # PAIR_MATCH: label 1 iff >= k shared content words
    content_words: int = 8  # PAIR_MATCH: w0..w{content_words-1} are content, the rest filler
    content_per_sentence: int = 2
    dev_fraction: float = 0.2


def word(i: int) -> str:
    return f"w{i}"


def keyword_label(text: str, trigger: int = 0) -> int:
    return int(word(trigger) in tokenize(text))


def parity_label(text: str, marked: int = 4) -> int:
    marks = {word(i) for i in range(marked)}
    return sum(tok in marks for tok in tokenize(text)) % 2


def content_set(text: str, content_words: int = 8) -> set[str]:
    content = {word(i) for i in range(content_words)}
    return {tok for tok in tokenize(text) if tok in content}


def pair_match_label(text_a: str, text_b: str, k: int = 1, content_words: int = 8) -> int:
    return int(len(content_set(text_a, content_words) & content_set(text_b, content_words)) >= k)


def synth_task(kind: TaskKind | str, n: int, vocab_size: int, seed: int, params: SynthParams = SynthParams()) -> Dataset:
    """Deterministic, exactly balanced synthetic classification task over words w0..w{vocab_size-1}.

    KEYWORD: 1 iff the trigger word occurs. PARITY: parity of the number of
    marked words. PAIR_MATCH: sentence pairs over content words and filler
    words; 1 iff the two sentences share at least ``overlap_k`` content words.
    """
    kind = TaskKind(kind)
    if n < 20:
        raise InvalidSize(f"n must be >= 20, got {n}")
    if not 1 <= params.min_len <= params.max_len:
        raise InvalidSize(f"bad sentence length range [{params.min_len}, {params.max_len}]")
    _check_vocab(kind, vocab_size, params)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2)
    examples = []
    for y in labels:
        length = int(rng.integers(params.min_len, params.max_len + 1))
        if kind is TaskKind.KEYWORD:
            examples.append(_keyword_example(rng, int(y), length, vocab_size, params))
        elif kind is TaskKind.PARITY:
            examples.append(_parity_example(rng, int(y), length, vocab_size, params))
        else:
            examples.append(_pair_example(rng, int(y), length, vocab_size, params))
    n_dev = max(1, int(round(n * params.dev_fraction)))
    return Dataset(examples[n_dev:], examples[:n_dev], ["0", "1"], name=kind.value.lower())


def _check_vocab(kind: TaskKind, vocab_size: int, params: SynthParams) -> None:
    if kind is TaskKind.KEYWORD:
        ok = vocab_size >= 2 and 0 <= params.trigger < vocab_size
    elif kind is TaskKind.PARITY:
        ok = 0 < params.marked < vocab_size
    else:
        m = params.content_per_sentence
        ok = (
            1 <= params.overlap_k <= m
            and params.content_words >= 2 * m
            and vocab_size > params.content_words
            and params.min_len >= m
        )
    if not ok:
        raise InvalidSize(f"vocab_size {vocab_size} / params {params} cannot generate a {kind.value} task")


def _keyword_example(rng, y, length, vocab_size, params) -> Example:
    pool = np.array([i for i in range(vocab_size) if i != params.trigger])
    toks = list(rng.choice(pool, size=length))
    if y:
        toks[int(rng.integers(length))] = params.trigger
    return Example(" ".join(word(t) for t in toks), None, y)


def _parity_example(rng, y, length, vocab_size, params) -> Example:
    toks = list(rng.integers(0, vocab_size, size=length))
    if sum(t < params.marked for t in toks) % 2 != y:
        pos = int(rng.integers(length))
        if toks[pos] < params.marked:
            toks[pos] = int(rng.integers(params.marked, vocab_size))
        else:
            toks[pos] = int(rng.integers(0, params.marked))
    return Example(" ".join(word(t) for t in toks), None, y)


def _pair_example(rng, y, length, vocab_size, params) -> Example:
    k, m, c = params.overlap_k, params.content_per_sentence, params.content_words
    content_a = rng.choice(c, size=m, replace=False)
    shared = int(rng.integers(k, m + 1)) if y else int(rng.integers(0, k))
    others = np.setdiff1d(np.arange(c), content_a)
    content_b = np.concatenate([rng.choice(content_a, size=shared, replace=False), rng.choice(others, size=m - shared, replace=False)])

    def sentence(content):
        length_s = int(rng.integers(params.min_len, params.max_len + 1))
        toks = np.concatenate([content, rng.integers(c, vocab_size, size=length_s - m)])
        return " ".join(word(t) for t in rng.permutation(toks))

    return Example(sentence(content_a), sentence(content_b), y)


# -- encoding ---------------------------------------------------------------


@dataclass
class EncodedSplit:
    ids: list[np.ndarray]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def encode_examples(examples: Sequence[Example], vocab: Vocab, max_len: int) -> EncodedSplit:
    ids = [np.array(vocab.encode_pair(ex.text_a, ex.text_b, max_len), dtype=np.int64) for ex in examples]
    return EncodedSplit(ids, np.array([ex.label for ex in examples], dtype=np.int64))


def pad_batch(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id arrays to a common length; returns (tokens, keep_mask)."""
    l = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), l), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
    return tokens, tokens != PAD_ID


def mask_tokens(tokens: np.ndarray, keep: np.ndarray, rate: float, rng: np.random.Generator):
    """Replace each maskable position with [MASK] with probability ``rate``.

    Specials (PAD, CLS, SEP) are never masked. Returns (masked tokens,
    (batch, position) pairs, original ids at those pairs).
    """
    maskable = keep & (tokens != CLS_ID) & (tokens != SEP_ID) & (tokens != PAD_ID)
    chosen = maskable & (rng.random(tokens.shape) < rate)
    pos = np.argwhere(chosen)
    out = tokens.copy()
    out[chosen] = MASK_ID
    return out, pos, tokens[chosen]
