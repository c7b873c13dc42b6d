"""Output heads, losses and metrics.

Every head is a set of affine projections stored in the model's tensor dict
under ``head.<name>.weight`` (in, out) and ``head.<name>.bias`` (out,).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import COGS_FIELDS, MASK_ID, UNK_ID

TASKS = ("mlm", "pos", "ner", "cls", "cogs")
HEAD_KIND = {"mlm": "mlm", "pos": "tagging", "ner": "tagging", "cls": "classification", "cogs": "cogs"}
METRIC = {"mlm": "perplexity", "pos": "accuracy", "ner": "f1", "cls": "accuracy", "cogs": "sentence_accuracy"}
HIGHER_IS_BETTER = {"perplexity": False, "accuracy": True, "f1": True, "sentence_accuracy": True}


class NoMaskedTokens(Exception):
    """The batch has no masked position; the caller should skip it."""


class ContractError(ValueError):
    pass


class TagFormatError(ValueError):
    pass


# --------------------------------------------------------------------------- heads


@dataclass
class TaskHead:
    kind: str
    in_width: int
    outputs: dict[str, int]     # projection name -> number of classes

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for name, n in self.outputs.items():
            out[f"head.{name}.weight"] = (self.in_width, n)
            out[f"head.{name}.bias"] = (n,)
        return out

    def init(self, rng: np.random.Generator, std: float = 0.02, dtype=np.float32) -> dict[str, np.ndarray]:
        params = {}
        for key, shape in self.shapes().items():
            if key.endswith(".bias"):
                params[key] = np.zeros(shape, dtype=dtype)
            else:
                params[key] = rng.normal(0.0, std, size=shape).astype(dtype)
        return params

    def to_dict(self) -> dict:
        return {"kind": self.kind, "in_width": self.in_width, "outputs": dict(self.outputs)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskHead":
        return cls(d["kind"], int(d["in_width"]), {k: int(v) for k, v in d["outputs"].items()})


def make_head(task: str, d: int, d_root: int, sizes: Mapping[str, int]) -> TaskHead:
    """``sizes`` holds ``vocab``, ``tags``, ``labels`` or the five COGS fields as needed."""
    kind = HEAD_KIND[task]
    if kind == "mlm":
        return TaskHead(kind, d, {"vocab": sizes["vocab"]})
    if kind == "tagging":
        return TaskHead(kind, d, {"tags": sizes["tags"]})
    if kind == "classification":
        return TaskHead(kind, d_root, {"labels": sizes["labels"]})
    return TaskHead(kind, d, {f: sizes[f] for f in COGS_FIELDS})


def project(x, params: Mapping, name: str) -> ad.Tensor:
    """Affine map of the last axis, flattening leading axes to rows."""
    x = ad._as_tensor(x)
    rows = ad.reshape(x, (-1, x.shape[-1]))
    return ad.add(ad.matmul(rows, params[f"head.{name}.weight"]), params[f"head.{name}.bias"])


@dataclass
class StepResult:
    """``loss`` is differentiable; ``total``/``count`` let metrics be summed across batches."""
    loss: ad.Tensor
    metric: float
    total: float
    count: int

    def __iter__(self):
        return iter((self.loss, self.metric))


# --------------------------------------------------------------------------- MLM


@dataclass
class MaskedBatch:
    inputs: np.ndarray     # ids with <mask> substituted
    original: np.ndarray
    positions: np.ndarray  # bool, True where masked

    @property
    def n_masked(self) -> int:
        return int(self.positions.sum())


def apply_mlm_mask(ids, lengths, rate: float = 0.30, rng: np.random.Generator | None = None) -> MaskedBatch:
    """Independently replace each real, non-``<unk>`` token by ``<mask>`` with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("mask rate must lie in [0, 1]")
    ids = np.asarray(ids, dtype=np.int64)
    valid = np.arange(ids.shape[1])[None, :] < np.asarray(lengths)[:, None]
    maskable = valid & (ids != UNK_ID)
    if rate == 0.0:
        chosen = np.zeros_like(maskable)
    else:
        if rng is None:
            raise ValueError("masking needs an rng")
        chosen = maskable & (rng.random(ids.shape) < rate)
    return MaskedBatch(np.where(chosen, MASK_ID, ids), ids.copy(), chosen)


def mlm_loss_and_perplexity(reps, params: Mapping, masked: MaskedBatch) -> StepResult:
    """Mean NLL over masked positions; perplexity is exp of that mean."""
    n = masked.n_masked
    if n == 0:
        raise NoMaskedTokens("no masked position in batch")
    logits = project(reps, params, "vocab")
    w = masked.positions.reshape(-1).astype(logits.dtype)
    nll_sum = ad.softmax_cross_entropy(logits, masked.original.reshape(-1), w)
    total = float(nll_sum.data)
    return StepResult(ad.scale(nll_sum, 1.0 / n), math.exp(total / n), total, n)


def unigram_perplexity(train_ids: Sequence[Sequence[int]], eval_ids: Sequence[int], vocab_size: int) -> float:
    """Add-one unigram model over the training tokens, scored on ``eval_ids``."""
    counts = np.ones(vocab_size, dtype=np.float64)
    for s in train_ids:
        for t in s:
            counts[t] += 1
    logp = np.log(counts / counts.sum())
    ev = np.asarray(eval_ids, dtype=np.int64)
    if ev.size == 0:
        raise ValueError("no tokens to evaluate")
    return float(np.exp(-logp[ev].mean()))


# --------------------------------------------------------------------------- tagging


def tagging_loss_and_accuracy(reps, params: Mapping, gold, lengths) -> StepResult:
    gold = np.asarray(gold, dtype=np.int64)
    valid = np.arange(gold.shape[1])[None, :] < np.asarray(lengths)[:, None]
    logits = project(reps, params, "tags")
    w = valid.reshape(-1).astype(logits.dtype)
    n = int(valid.sum())
    loss = ad.scale(ad.softmax_cross_entropy(logits, gold.reshape(-1), w), 1.0 / n)
    pred = logits.data.argmax(axis=1)
    correct = int(((pred == gold.reshape(-1)) & valid.reshape(-1)).sum())
    return StepResult(loss, correct / n, float(correct), n)


def predict_tags(reps, params: Mapping, lengths) -> list[list[int]]:
    r = ad._as_tensor(reps)
    pred = project(r, params, "tags").data.argmax(axis=1).reshape(r.shape[:2])
    return [list(map(int, pred[b, :int(n)])) for b, n in enumerate(lengths)]


_BIOES = re.compile(r"^([BIES])-(.+)$")


def _parse_tag(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    m = _BIOES.match(tag)
    if not m:
        raise TagFormatError(f"unknown BIOES tag {tag!r}")
    return m.group(1), m.group(2)


def bioes_spans(tags: Sequence[str]) -> set[tuple[int, int, str]]:
    """Spans (start, end inclusive, type) from well-formed ``S`` or ``B I* E`` runs of one type."""
    spans = set()
    start, typ = None, None
    for i, tag in enumerate(tags):
        prefix, t = _parse_tag(tag)
        if prefix == "S":
            spans.add((i, i, t))
            start = None
        elif prefix == "B":
            start, typ = i, t
        elif prefix == "I":
            if start is None or t != typ:
                start = None
        elif prefix == "E":
            if start is not None and t == typ:
                spans.add((start, i, t))
            start = None
        else:
            start = None
    return spans


def bioes_decode_and_f1(predicted: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> dict:
    """Micro F1 over exact (span, type) matches. No entities on either side counts as 1.0."""
    if len(predicted) != len(gold):
        raise ValueError("predicted and gold sentence counts differ")
    tp = n_pred = n_gold = 0
    for p, g in zip(predicted, gold):
        ps, gs = bioes_spans(p), bioes_spans(g)
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    if n_pred == 0 and n_gold == 0:
        return {"precision": 1.0, "recall": 1.0, "f1": 1.0, "tp": 0, "n_pred": 0, "n_gold": 0}
    prec = tp / n_pred if n_pred else 0.0
    rec = tp / n_gold if n_gold else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return {"precision": prec, "recall": rec, "f1": f1, "tp": tp, "n_pred": n_pred, "n_gold": n_gold}


# --------------------------------------------------------------------------- classification


def classification_loss_accuracy(root_rep, params: Mapping, gold) -> StepResult:
    if root_rep is None:
        raise ContractError("classification reads the root node; enable use_root")
    gold = np.asarray(gold, dtype=np.int64)
    logits = project(root_rep, params, "labels")
    n = len(gold)
    loss = ad.scale(ad.softmax_cross_entropy(logits, gold), 1.0 / n)
    correct = int((logits.data.argmax(axis=1) == gold).sum())
    return StepResult(loss, correct / n, float(correct), n)


# --------------------------------------------------------------------------- COGS


def cogs_heads_loss_and_sentence_accuracy(reps, params: Mapping, gold, lengths) -> StepResult:
    """Sum of five per-token cross-entropies; a sentence is right iff every tag is."""
    gold = np.asarray(gold, dtype=np.int64)          # (B, N, 5)
    B, N, _ = gold.shape
    valid = np.arange(N)[None, :] < np.asarray(lengths)[:, None]
    n_tok = int(valid.sum())
    w = valid.reshape(-1).astype(ad._as_tensor(reps).dtype)
    loss = None
    all_right = np.ones((B, N), dtype=bool)
    for f, name in enumerate(COGS_FIELDS):
        logits = project(reps, params, name)
        term = ad.softmax_cross_entropy(logits, gold[:, :, f].reshape(-1), w)
        loss = term if loss is None else ad.add(loss, term)
        all_right &= logits.data.argmax(axis=1).reshape(B, N) == gold[:, :, f]
    correct = int((all_right | ~valid).all(axis=1).sum())
    return StepResult(ad.scale(loss, 1.0 / n_tok), correct / B, float(correct), B)


# --------------------------------------------------------------------------- reporting


def metric_report(task: str, split: str, metric: str, value: float, n_items: int) -> dict:
    return {"task": task, "split": split, "metric": metric, "value": float(value), "n_items": int(n_items)}
