"""Corpora, vocabularies and padded batches.

File formats
------------
text   one sentence per line, tokens split on ASCII whitespace, blank lines skipped
conll  whitespace-separated columns, blank line between sentences, ``#`` comments
label  ``label<TAB>sentence`` per line
cogs   six columns per word: word, parent, role, category, noun determiner, verb name;
       ``parent`` is a 0-based index or ``-1`` for no parent
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .model import make_rng

log = logging.getLogger(__name__)

UNK, MASK, PAD = "<unk>", "<mask>", "<pad>"
RESERVED = (UNK, MASK, PAD)
UNK_ID, MASK_ID, PAD_ID = 0, 1, 2

SELF = "self"
COGS_FIELDS = ("parent", "role", "category", "noun_det", "verb_name")
_WS = re.compile("[ \t\n\r\x0b\x0c]+")  # ASCII whitespace only


class DataFormatError(ValueError):
    pass


class CorpusIOError(OSError):
    pass


# --------------------------------------------------------------------------- vocabularies


class Vocab:
    """Token inventory with reserved ids ``<unk>=0, <mask>=1, <pad>=2``."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError(f"a vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])


def build_vocab(sentences: Iterable[Sequence[str]], min_freq: int = 1, max_size: int | None = None) -> Vocab:
    """Frequency-descending, then lexicographic. Reserved tokens in the data are not re-added."""
    counts = Counter(t for s in sentences for t in s)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                    key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[: max(0, max_size - len(RESERVED))]
    return Vocab(list(RESERVED) + ranked)


class LabelSet:
    """Closed inventory of tag or class strings. Unknown strings are an error."""

    def __init__(self, labels: Sequence[str]):
        self.labels = list(labels)
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate labels")
        self.index = {l: i for i, l in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelSet) and self.labels == other.labels

    def encode(self, labels: Iterable[str]) -> list[int]:
        out = []
        for l in labels:
            if l not in self.index:
                raise DataFormatError(f"label {l!r} is not in the inventory")
            out.append(self.index[l])
        return out

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.labels[int(i)] for i in ids]

    @classmethod
    def from_data(cls, labels: Iterable[str]) -> "LabelSet":
        return cls(sorted(set(labels)))


def parent_offset_labels(max_offset: int = 30) -> LabelSet:
    """``self`` followed by signed offsets -max..-1, 1..max."""
    offsets = [str(k) for k in range(-max_offset, max_offset + 1) if k != 0]
    return LabelSet([SELF] + offsets)


# --------------------------------------------------------------------------- corpora


@dataclass
class Corpus:
    sentences: list[list[str]]
    tags: list[list[str]] | None = None
    labels: list[str] | None = None
    cogs: list[list[tuple[str, ...]]] | None = None   # five tags per word
    split: str = "train"

    def __post_init__(self):
        for k, s in enumerate(self.sentences):
            if not s:
                raise DataFormatError(f"sentence {k} is empty")
        for name, rows in (("tags", self.tags), ("cogs", self.cogs)):
            if rows is None:
                continue
            if len(rows) != len(self.sentences):
                raise DataFormatError(f"{name}: {len(rows)} rows for {len(self.sentences)} sentences")
            for k, (s, t) in enumerate(zip(self.sentences, rows)):
                if len(s) != len(t):
                    raise DataFormatError(f"{name}: sentence {k} has {len(s)} tokens and {len(t)} tags")
        if self.labels is not None and len(self.labels) != len(self.sentences):
            raise DataFormatError("one label per sentence required")

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


def _read_lines(path) -> Iterator[tuple[int, str]]:
    """Yield (1-based line number, line without newline); decoding errors name the line."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CorpusIOError(f"{path}: cannot read ({e.strerror or e})") from e
    for no, line in enumerate(raw.split(b"\n"), start=1):
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorpusIOError(f"{path}:{no}: invalid UTF-8 ({e.reason})") from e
        yield no, text.rstrip("\r")


def _split_ws(line: str) -> list[str]:
    return [t for t in _WS.split(line) if t]


def load_text_corpus(path, split: str = "train") -> Corpus:
    sents = []
    for _, line in _read_lines(path):
        toks = _split_ws(line)
        if toks:
            sents.append(toks)
    return Corpus(sents, split=split)


def _blocks(path) -> Iterator[list[tuple[int, list[str]]]]:
    block: list[tuple[int, list[str]]] = []
    for no, line in _read_lines(path):
        if line.startswith("#"):
            continue
        cols = _split_ws(line)
        if not cols:
            if block:
                yield block
            block = []
            continue
        block.append((no, cols))
    if block:
        yield block


def load_conll_columns(path, token_col: int = 0, tag_col: int = 1, split: str = "train") -> Corpus:
    sents, tags = [], []
    for block in _blocks(path):
        width = len(block[0][1])
        toks, ts = [], []
        for no, cols in block:
            if len(cols) != width:
                raise DataFormatError(f"{path}:{no}: expected {width} columns, found {len(cols)}")
            if max(token_col, tag_col) >= width:
                raise DataFormatError(f"{path}:{no}: column index out of range for {width} columns")
            toks.append(cols[token_col])
            ts.append(cols[tag_col])
        sents.append(toks)
        tags.append(ts)
    return Corpus(sents, tags=tags, split=split)


def load_label_tsv(path, split: str = "train") -> Corpus:
    sents, labels = [], []
    for no, line in _read_lines(path):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataFormatError(f"{path}:{no}: expected label<TAB>sentence")
        label, text = line.split("\t", 1)
        toks = _split_ws(text)
        if not label or not toks:
            raise DataFormatError(f"{path}:{no}: empty label or sentence")
        labels.append(label)
        sents.append(toks)
    return Corpus(sents, labels=labels, split=split)


def parent_to_class(i: int, parent: int) -> str:
    if parent == -1:
        return SELF
    if parent == i:
        raise DataFormatError(f"word {i} names itself as parent")
    return str(parent - i)


def class_to_parent(i: int, label: str) -> int:
    return -1 if label == SELF else i + int(label)


def load_cogs_tsv(path, split: str = "train") -> Corpus:
    sents, rows = [], []
    for block in _blocks(path):
        toks, tags = [], []
        for i, (no, cols) in enumerate(block):
            if len(cols) != 6:
                raise DataFormatError(f"{path}:{no}: expected 6 columns, found {len(cols)}")
            try:
                parent = int(cols[1])
            except ValueError:
                raise DataFormatError(f"{path}:{no}: parent {cols[1]!r} is not an integer") from None
            if parent < -1 or parent >= len(block):
                raise DataFormatError(f"{path}:{no}: parent {parent} outside the sentence")
            try:
                offset = parent_to_class(i, parent)
            except DataFormatError as e:
                raise DataFormatError(f"{path}:{no}: {e}") from None
            toks.append(cols[0])
            tags.append((offset,) + tuple(cols[2:]))
        sents.append(toks)
        rows.append(tags)
    return Corpus(sents, cogs=rows, split=split)


# --------------------------------------------------------------------------- writers (round trip)


def write_text_corpus(corpus: Corpus, path) -> None:
    Path(path).write_text("".join(" ".join(s) + "\n" for s in corpus.sentences), encoding="utf-8")


def write_conll(corpus: Corpus, path) -> None:
    blocks = ["".join(f"{w}\t{t}\n" for w, t in zip(s, ts)) for s, ts in zip(corpus.sentences, corpus.tags)]
    Path(path).write_text("\n".join(blocks), encoding="utf-8")


def write_label_tsv(corpus: Corpus, path) -> None:
    Path(path).write_text("".join(f"{l}\t{' '.join(s)}\n" for l, s in zip(corpus.labels, corpus.sentences)),
                          encoding="utf-8")


def write_cogs_tsv(corpus: Corpus, path) -> None:
    blocks = []
    for s, tags in zip(corpus.sentences, corpus.cogs):
        lines = []
        for i, (w, t) in enumerate(zip(s, tags)):
            lines.append("\t".join([w, str(class_to_parent(i, t[0]))] + list(t[1:])) + "\n")
        blocks.append("".join(lines))
    Path(path).write_text("\n".join(blocks), encoding="utf-8")


# --------------------------------------------------------------------------- batching


@dataclass
class Batch:
    ids: np.ndarray                 # (B, N) int64, PAD_ID beyond each length
    lengths: np.ndarray             # (B,)
    tags: np.ndarray | None = None  # (B, N) tag ids, 0 on padding
    labels: np.ndarray | None = None
    cogs: np.ndarray | None = None  # (B, N, 5)
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]

    def __len__(self) -> int:
        return self.ids.shape[0]


@dataclass
class Encoders:
    """Inventories used to turn a corpus into integer targets."""
    vocab: Vocab
    tags: LabelSet | None = None
    labels: LabelSet | None = None
    cogs: list[LabelSet] | None = None


def make_batches(corpus: Corpus, enc: Encoders | Vocab, batch_size: int, max_len: int = 128,
                 seed: int = 0, epoch: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    """Padded batches; the order is a seeded shuffle of ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if isinstance(enc, Vocab):
        enc = Encoders(enc)
    order = np.arange(len(corpus))
    if shuffle:
        order = make_rng([seed, epoch]).permutation(len(corpus))
    n_trunc = sum(1 for s in corpus.sentences if len(s) > max_len)
    if n_trunc:
        log.warning("%d sentence(s) longer than %d tokens were truncated", n_trunc, max_len)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        lens = np.array([min(len(corpus.sentences[k]), max_len) for k in idx], dtype=np.int64)
        N = int(lens.max())
        ids = np.full((len(idx), N), PAD_ID, dtype=np.int64)
        tags = np.zeros((len(idx), N), dtype=np.int64) if corpus.tags is not None and enc.tags is not None else None
        cogs = (np.zeros((len(idx), N, len(COGS_FIELDS)), dtype=np.int64)
                if corpus.cogs is not None and enc.cogs is not None else None)
        for r, k in enumerate(idx):
            n = lens[r]
            ids[r, :n] = enc.vocab.encode(corpus.sentences[k][:n])
            if tags is not None:
                tags[r, :n] = enc.tags.encode(corpus.tags[k][:n])
            if cogs is not None:
                for f, inv in enumerate(enc.cogs):
                    try:
                        cogs[r, :n, f] = inv.encode(t[f] for t in corpus.cogs[k][:n])
                    except DataFormatError as e:
                        raise DataFormatError(
                            f"sentence {k} ({' '.join(corpus.sentences[k])!r}): {COGS_FIELDS[f]} {e}") from None
        labels = None
        if corpus.labels is not None and enc.labels is not None:
            labels = np.array(enc.labels.encode(corpus.labels[k] for k in idx), dtype=np.int64)
        yield Batch(ids=ids, lengths=lens, tags=tags, labels=labels, cogs=cogs, order=idx)


def build_encoders(corpus: Corpus, min_freq: int = 1, max_vocab: int | None = None,
                   max_offset: int = 30) -> Encoders:
    """Inventories from a training corpus."""
    enc = Encoders(build_vocab(corpus.sentences, min_freq=min_freq, max_size=max_vocab))
    if corpus.tags is not None:
        enc.tags = LabelSet.from_data(t for ts in corpus.tags for t in ts)
    if corpus.labels is not None:
        enc.labels = LabelSet.from_data(corpus.labels)
    if corpus.cogs is not None:
        enc.cogs = [parent_offset_labels(max_offset)]
        for f in range(1, len(COGS_FIELDS)):
            enc.cogs.append(LabelSet.from_data(t[f] for ts in corpus.cogs for t in ts))
    return enc
