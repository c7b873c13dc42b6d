"""Small generated corpora with known structure, used by the end-to-end tests.

Each generator is a pure function of ``(n, seed)`` and returns a :class:`Corpus`.

* ``mlm``: topic-agreement grammar. A subject noun fixes the verb's topic and an
  optional adjective shares its noun's topic, so context narrows every masked
  content word to a handful of candidates.
* ``tagging``: every sentence mixes unambiguous words with ambiguous ones whose tag
  is decided by the tag class of the word to their left.
* ``ner``: entity patterns (title + surname, preposition + city, company + suffix)
  labelled in BIOES.
* ``cls``: label is the parity of the number of keyword occurrences.
* ``cogs``: tiny agent/theme templates tagged with the five per-word fields.
"""

from __future__ import annotations

from pathlib import Path

from .data import Corpus, write_cogs_tsv, write_conll, write_label_tsv, write_text_corpus
from .model import make_rng

TOPICS = {
    "animal": (["dog", "cat", "horse", "bird"], ["barks", "sleeps"], ["furry", "wild"]),
    "vehicle": (["car", "truck", "bus", "train"], ["drives", "stops"], ["fast", "rusty"]),
    "food": (["bread", "apple", "soup", "cake"], ["tastes", "cools"], ["sweet", "fresh"]),
    "person": (["doctor", "farmer", "artist", "pilot"], ["speaks", "works"], ["kind", "tired"]),
    "tool": (["hammer", "saw", "drill", "wrench"], ["breaks", "rusts"], ["heavy", "sharp"]),
    "plant": (["tree", "rose", "fern", "cactus"], ["grows", "blooms"], ["green", "tall"]),
}
DETS = ["the", "a", "every", "some"]
LINKS = ["near", "with", "behind"]


def _choice(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _noun_phrase(rng, topic, adj_rate=0.5):
    nouns, _, adjs = TOPICS[topic]
    words = [_choice(rng, DETS)]
    if rng.random() < adj_rate:
        words.append(_choice(rng, adjs))
    words.append(_choice(rng, nouns))
    return words


def mlm_corpus(n: int = 2000, seed: int = 0, split: str = "train") -> Corpus:
    rng = make_rng([seed, 1])
    names = list(TOPICS)
    sents = []
    for _ in range(n):
        subj = _choice(rng, names)
        words = _noun_phrase(rng, subj) + [_choice(rng, TOPICS[subj][1])]
        if rng.random() < 0.7:
            words += [_choice(rng, LINKS)] + _noun_phrase(rng, _choice(rng, names))
        words.append(".")
        sents.append(words)
    return Corpus(sents, split=split)


# tagging: ambiguous words take the tag their left neighbour licenses
_TAG_WORDS = {
    "DET": ["the", "a", "this"],
    "ADJ": ["green", "tall", "calm"],
    "NOUN": ["dog", "idea", "house", "river"],
    "VERB": ["sees", "wants", "finds"],
    "ADV": ["quickly", "often", "rarely"],
}
_AMBIGUOUS = ["run", "light", "play", "watch"]
_LICENSED = {"DET": "NOUN", "ADJ": "NOUN", "NOUN": "VERB", "VERB": "ADV", "ADV": "VERB"}


def tagging_corpus(n: int = 2000, seed: int = 0, split: str = "train") -> Corpus:
    """Unambiguous words carry their class; an ambiguous word follows an unambiguous one
    and takes the tag licensed by that neighbour's class."""
    rng = make_rng([seed, 2])
    classes = list(_TAG_WORDS)
    sents, tags = [], []
    for _ in range(n):
        words, ts = [], []
        for _ in range(int(rng.integers(4, 11))):
            prev_plain = bool(words) and words[-1] not in _AMBIGUOUS
            if prev_plain and rng.random() < 0.4:
                words.append(_choice(rng, _AMBIGUOUS))
                ts.append(_LICENSED[ts[-1]])
            else:
                tag = _choice(rng, classes)
                words.append(_choice(rng, _TAG_WORDS[tag]))
                ts.append(tag)
        sents.append(words)
        tags.append(ts)
    return Corpus(sents, tags=tags, split=split)


_TITLES = ["mr", "ms", "dr"]
_SURNAMES = ["smith", "jones", "brown", "lee", "garcia"]
_CITIES = ["paris", "lima", "oslo", "cairo"]
_FIRMS = ["acme", "globex", "initech"]
_FILLER = ["yesterday", "met", "visited", "called", "and", "then", "left", "for", "work"]


def ner_corpus(n: int = 1000, seed: int = 0, split: str = "train") -> Corpus:
    rng = make_rng([seed, 3])
    sents, tags = [], []
    for _ in range(n):
        words, ts = [], []
        for _ in range(int(rng.integers(1, 4))):
            kind = int(rng.integers(4))
            if kind == 0:
                words += [_choice(rng, _TITLES), _choice(rng, _SURNAMES)]
                ts += ["B-PER", "E-PER"]
            elif kind == 1:
                words += ["in", _choice(rng, _CITIES)]
                ts += ["O", "S-LOC"]
            elif kind == 2:
                words += [_choice(rng, _FIRMS), "corp", "ltd"]
                ts += ["B-ORG", "I-ORG", "E-ORG"]
            else:
                words.append(_choice(rng, _FILLER))
                ts.append("O")
        sents.append(words)
        tags.append(ts)
    return Corpus(sents, tags=tags, split=split)


KEYWORDS = ["zap"]
_CLS_FILLER = ["we", "saw", "it", "there", "and", "then", "a", "small", "old", "red", "box", "went", "home"]


def cls_corpus(n: int = 2000, seed: int = 0, split: str = "train", max_keywords: int = 3) -> Corpus:
    """Label ``odd``/``even`` by the keyword count, drawn uniformly from 0..max_keywords."""
    rng = make_rng([seed, 4])
    sents, labels = [], []
    for _ in range(n):
        k = int(rng.integers(max_keywords + 1))
        length = int(rng.integers(max(k, 3), 9))
        words = [_choice(rng, _CLS_FILLER) for _ in range(length)]
        for pos in rng.choice(length, size=k, replace=False):
            words[int(pos)] = _choice(rng, KEYWORDS)
        sents.append(words)
        labels.append("odd" if k % 2 else "even")
    return Corpus(sents, labels=labels, split=split)


_AGENTS = ["emma", "liam", "noah", "olivia"]
_NOUNS = ["cake", "ball", "book", "cookie"]
_VERBS = {"ate": "eat", "saw": "see", "threw": "throw", "liked": "like"}


def cogs_corpus(n: int = 500, seed: int = 0, split: str = "train") -> Corpus:
    """``agent verb det noun`` or ``det noun was verb by agent`` with five tags per word."""
    rng = make_rng([seed, 5])
    sents, rows = [], []
    none, root = "-", "self"
    for _ in range(n):
        agent, noun = _choice(rng, _AGENTS), _choice(rng, _NOUNS)
        verb = _choice(rng, list(_VERBS))
        det = _choice(rng, ["a", "the"])
        ndet = "indef" if det == "a" else "def"
        if rng.random() < 0.6:
            words = [agent, verb, det, noun]
            tags = [("1", "agent", "name", none, none),
                    (root, none, "verb", none, _VERBS[verb]),
                    (root, none, "det", none, none),
                    ("-2", "theme", "noun", ndet, none)]
        else:
            words = [det, noun, "was", verb, "by", agent]
            tags = [(root, none, "det", none, none),
                    ("2", "theme", "noun", ndet, none),
                    (root, none, "aux", none, none),
                    (root, none, "verb", none, _VERBS[verb]),
                    (root, none, "prep", none, none),
                    ("-2", "agent", "name", none, none)]
        sents.append(words)
        rows.append(tags)
    return Corpus(sents, cogs=rows, split=split)


GENERATORS = {
    "mlm": mlm_corpus,
    "tagging": tagging_corpus,
    "ner": ner_corpus,
    "cls": cls_corpus,
    "cogs": cogs_corpus,
}
SPLIT_SIZES = {"train": 1.0, "valid": 0.2, "test": 0.2}
_SPLIT_SEEDS = {"train": 0, "valid": 1, "test": 2}


def generate_splits(task: str, n: int, seed: int = 0) -> dict[str, Corpus]:
    gen = GENERATORS[task]
    return {s: gen(max(1, int(n * frac)), seed=seed * 10 + _SPLIT_SEEDS[s], split=s)
            for s, frac in SPLIT_SIZES.items()}


def write_splits(task: str, outdir, n: int, seed: int = 0) -> dict[str, Path]:
    """Write train/valid/test files in the loader format of ``task``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    writer, ext = {
        "mlm": (write_text_corpus, "txt"),
        "tagging": (write_conll, "conll"),
        "ner": (write_conll, "conll"),
        "cls": (write_label_tsv, "tsv"),
        "cogs": (write_cogs_tsv, "tsv"),
    }[task]
    paths = {}
    for split, corpus in generate_splits(task, n, seed).items():
        paths[split] = outdir / f"{split}.{ext}"
        writer(corpus, paths[split])
    return paths

