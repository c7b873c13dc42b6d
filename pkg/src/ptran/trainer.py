"""Run configuration, optimisation loop, evaluation and inspection."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import autodiff as ad
from . import tasks
from .checkpoint import Checkpoint, IncompatibleCheckpoint, load_checkpoint, save_checkpoint
from .data import (COGS_FIELDS, Corpus, Encoders, LabelSet, Vocab, build_encoders, load_cogs_tsv,
                   load_conll_columns, load_label_tsv, load_text_corpus, make_batches)
from .inference import encode, format_dependencies, run_inference
from .model import RNG_ALGORITHM, ConfigError, ModelConfig, init_parameters, make_rng, parameter_shapes, ternary_names
from .presets import get_preset

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteGradient(TrainingDiverged):
    pass


# --------------------------------------------------------------------------- configuration


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: str = "mlm"
    train_path: str | None = None
    valid_path: str | None = None
    token_col: int = 0
    tag_col: int = 1
    out_dir: str = "runs/default"
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    l2_ternary: float = 0.0
    mask_rate: float = 0.30
    max_len: int = 128
    min_freq: int = 1
    max_vocab: int | None = None
    max_offset: int = 30
    init_std: float = 0.02
    dtype: str = "float32"
    time_budget_s: float | None = None   # CPU seconds; training stops after the batch that crosses it
    target_metric: float | None = None   # stop once the validation metric reaches this value

    def validate(self, check_paths: bool = True) -> None:
        problems = []
        if self.task not in tasks.TASKS:
            problems.append(f"task must be one of {tasks.TASKS}")
        for name in ("lr", "eps"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        for name in ("weight_decay", "l2_ternary"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                problems.append(f"{name} must lie in [0, 1)")
        if self.batch_size < 1 or self.max_len < 1:
            problems.append("batch_size and max_len must be >= 1")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if not 0 <= self.mask_rate <= 1:
            problems.append("mask_rate must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            problems.append("dtype must be float32 or float64")
        if self.task == "cls" and not self.model.use_root:
            problems.append("task cls reads the root node; set model.use_root")
        if check_paths:
            for name in ("train_path", "valid_path"):
                p = getattr(self, name)
                if p is None or not Path(p).is_file():
                    problems.append(f"{name} {p!r} is not a readable file")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["model"] = self.model.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        model = data.pop("model", {})
        if not isinstance(model, ModelConfig):
            model = ModelConfig.from_dict(model)
        return cls(model=model, **data)


def _merge(base: dict, extra: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    """``a.b=value``; the value is read as JSON when possible, else kept as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def build_run_config(data: Mapping, overrides=(), base_dir=None) -> RunConfig:
    """Preset (optional ``preset`` key), then file values, then ``--set`` overrides."""
    data = dict(data)
    preset = data.pop("preset", None)
    merged = _merge(get_preset(preset), data) if preset else data
    for item in overrides:
        path, value = parse_override(item)
        node = merged
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-object")
        node[path[-1]] = value
    if base_dir is not None:
        for name in ("train_path", "valid_path", "out_dir"):
            if merged.get(name) and not Path(merged[name]).is_absolute():
                merged[name] = str(Path(base_dir) / merged[name])
    return RunConfig.from_dict(merged)


def load_run_config(path, overrides=()) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return build_run_config(data, overrides, base_dir=Path(path).parent)


def load_corpus(task: str, path, split: str, token_col: int = 0, tag_col: int = 1) -> Corpus:
    if task == "mlm":
        return load_text_corpus(path, split)
    if task in ("pos", "ner"):
        return load_conll_columns(path, token_col, tag_col, split)
    if task == "cls":
        return load_label_tsv(path, split)
    return load_cogs_tsv(path, split)


# --------------------------------------------------------------------------- optimisation


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, **hyper)


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState) -> None:
    """In-place Adam with bias correction; decoupled decay scales parameters first."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for tensor {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if state.weight_decay:
            p *= p.dtype.type(1.0 - state.lr * state.weight_decay)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def regularized_loss(task_loss: ad.Tensor, params: Mapping, config: ModelConfig, coeff: float) -> ad.Tensor:
    """``task_loss + coeff * sum of squares`` over the stored ternary tensors (factors when decomposed)."""
    if coeff == 0:
        return task_loss
    total = task_loss
    for name in ternary_names(config):
        x = params[name]
        total = ad.add(total, ad.scale(ad.tsum(ad.mul(x, x)), coeff))
    return total


# --------------------------------------------------------------------------- model bundle


@dataclass
class Model:
    run: RunConfig
    enc: Encoders
    head: tasks.TaskHead
    params: dict[str, np.ndarray]

    @property
    def config(self) -> ModelConfig:
        return self.run.model


def _sizes(enc: Encoders) -> dict[str, int]:
    sizes = {"vocab": len(enc.vocab)}
    if enc.tags is not None:
        sizes["tags"] = len(enc.tags)
    if enc.labels is not None:
        sizes["labels"] = len(enc.labels)
    if enc.cogs is not None:
        sizes.update({f: len(inv) for f, inv in zip(COGS_FIELDS, enc.cogs)})
    return sizes


def init_model(run: RunConfig, enc: Encoders) -> Model:
    dtype = np.dtype(run.dtype)
    cfg = run.model
    params = dict(init_parameters(cfg, len(enc.vocab), seed=run.seed, std=run.init_std, dtype=dtype).tensors)
    head = tasks.make_head(run.task, cfg.d, cfg.d_root, _sizes(enc))
    params.update(head.init(make_rng([run.seed, 1]), std=run.init_std, dtype=dtype))
    return Model(run, enc, head, params)


def forward(model: Model, params: Mapping, batch, *, training: bool, rng) -> tasks.StepResult:
    """Task loss and metric of one batch. MLM masking draws from ``rng`` before dropout does."""
    run, cfg = model.run, model.config
    ids = batch.ids
    masked = None
    if run.task == "mlm":
        masked = tasks.apply_mlm_mask(ids, batch.lengths, run.mask_rate, rng)
        if masked.n_masked == 0:
            raise tasks.NoMaskedTokens("no masked position in batch")
        ids = masked.inputs
    out = encode(params, ids, batch.lengths, cfg, training=training, rng=rng)
    if run.task == "mlm":
        return tasks.mlm_loss_and_perplexity(out.reps, params, masked)
    if run.task in ("pos", "ner"):
        return tasks.tagging_loss_and_accuracy(out.reps, params, batch.tags, batch.lengths)
    if run.task == "cls":
        return tasks.classification_loss_accuracy(out.root_rep, params, batch.labels)
    return tasks.cogs_heads_loss_and_sentence_accuracy(out.reps, params, batch.cogs, batch.lengths)


def evaluate_corpus(model: Model, corpus: Corpus, split: str = "valid") -> dict:
    """Metric over a whole corpus by summing per-batch counts. MLM masks use a fixed seed."""
    run = model.run
    rng = make_rng([run.seed, 7919])
    total = 0.0
    count = 0
    pred_tags, gold_tags = [], []
    for batch in make_batches(corpus, model.enc, run.batch_size, run.max_len, shuffle=False):
        if run.task == "ner":
            out = encode(model.params, batch.ids, batch.lengths, model.config)
            for row, k in zip(tasks.predict_tags(out.reps, model.params, batch.lengths), batch.order):
                pred_tags.append(model.enc.tags.decode(row))
                gold_tags.append(corpus.tags[k][:len(row)])
            continue
        try:
            res = forward(model, model.params, batch, training=False, rng=rng)
        except tasks.NoMaskedTokens:
            continue
        total += res.total
        count += res.count
    metric = tasks.METRIC[run.task]
    if run.task == "ner":
        value = tasks.bioes_decode_and_f1(pred_tags, gold_tags)["f1"]
        count = len(corpus)
    elif run.task == "mlm":
        value = float(np.exp(total / count)) if count else float("nan")
    else:
        value = total / count if count else float("nan")
    return tasks.metric_report(run.task, split, metric, value, count)


# --------------------------------------------------------------------------- checkpoints


def _inventories(enc: Encoders) -> dict:
    return {
        "tags": None if enc.tags is None else enc.tags.labels,
        "labels": None if enc.labels is None else enc.labels.labels,
        "cogs": None if enc.cogs is None else [inv.labels for inv in enc.cogs],
    }


def save_model(path, model: Model, opt: OptimizerState | None = None, *, epoch: int = 0,
               best: dict | None = None, rng: np.random.Generator | None = None) -> None:
    tensors = dict(model.params)
    meta = {
        "run": model.run.to_dict(),
        "vocab": model.enc.vocab.tokens,
        "inventories": _inventories(model.enc),
        "head": model.head.to_dict(),
        "epoch": epoch,
        "best": best,
        "rng": {"algorithm": RNG_ALGORITHM, "state": None if rng is None else rng.bit_generator.state},
        "optimizer": None,
    }
    if opt is not None:
        meta["optimizer"] = {"step": opt.step, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                             "eps": opt.eps, "weight_decay": opt.weight_decay}
        for name in model.params:
            tensors[f"adam.m.{name}"] = opt.m[name]
            tensors[f"adam.v.{name}"] = opt.v[name]
    save_checkpoint(path, meta, tensors)


@dataclass
class Restored:
    model: Model
    opt: OptimizerState | None
    epoch: int
    best: dict | None
    rng: np.random.Generator | None
    raw: Checkpoint


def restore(path) -> Restored:
    ck = load_checkpoint(path)
    meta = ck.meta
    try:
        run = RunConfig.from_dict(meta["run"])
        inv = meta["inventories"]
        enc = Encoders(Vocab(meta["vocab"]))
        enc.tags = None if inv["tags"] is None else LabelSet(inv["tags"])
        enc.labels = None if inv["labels"] is None else LabelSet(inv["labels"])
        enc.cogs = None if inv["cogs"] is None else [LabelSet(x) for x in inv["cogs"]]
        head = tasks.TaskHead.from_dict(meta["head"])
    except (KeyError, TypeError, ValueError) as e:
        raise IncompatibleCheckpoint(f"{path}: malformed metadata ({e})") from None
    names = list(parameter_shapes(run.model, len(enc.vocab))) + list(head.shapes())
    ck.require(names)
    expected = {**parameter_shapes(run.model, len(enc.vocab)), **head.shapes()}
    for name, shape in expected.items():
        if tuple(ck.tensors[name].shape) != shape:
            raise IncompatibleCheckpoint(f"{path}: tensor {name!r} has shape {ck.tensors[name].shape}, "
                                         f"config implies {shape}")
    params = {n: np.array(ck.tensors[n]) for n in names}
    model = Model(run, enc, head, params)
    opt = None
    if meta.get("optimizer"):
        ck.require([f"adam.{k}.{n}" for n in names for k in "mv"])
        opt = OptimizerState({n: np.array(ck.tensors[f"adam.m.{n}"]) for n in names},
                             {n: np.array(ck.tensors[f"adam.v.{n}"]) for n in names}, **meta["optimizer"])
    rng = None
    rs = meta.get("rng") or {}
    if rs.get("algorithm") not in (None, RNG_ALGORITHM):
        raise IncompatibleCheckpoint(f"{path}: RNG {rs['algorithm']!r} is not {RNG_ALGORITHM}")
    if rs.get("state") is not None:
        rng = make_rng(0)
        rng.bit_generator.state = rs["state"]
    return Restored(model, opt, int(meta.get("epoch", 0)), meta.get("best"), rng, ck)


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    out_dir: Path
    last: Path
    best: Path | None
    log: Path
    history: list[dict]
    stopped_early: bool = False
    reached_target: bool = False


def _reached(metric: str, value: float, target: float | None) -> bool:
    if target is None or not np.isfinite(value):
        return False
    return value >= target if tasks.HIGHER_IS_BETTER[metric] else value <= target


def _improved(metric: str, value: float, best: dict | None) -> bool:
    if not np.isfinite(value):
        return False
    if best is None:
        return True
    return value > best["value"] if tasks.HIGHER_IS_BETTER[metric] else value < best["value"]


def train(run: RunConfig, *, resume: bool = False, train_corpus: Corpus | None = None,
          valid_corpus: Corpus | None = None) -> TrainResult:
    """Epochs of shuffled batches with a validation pass, ``last.ckpt`` and ``best.ckpt`` after each.

    Corpora may be passed directly; otherwise they are read from the configured paths.
    """
    run.validate(check_paths=train_corpus is None)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last_path, best_path, log_path = out / "last.ckpt", out / "best.ckpt", out / "metrics.jsonl"
    if train_corpus is None:
        train_corpus = load_corpus(run.task, run.train_path, "train", run.token_col, run.tag_col)
        valid_corpus = load_corpus(run.task, run.valid_path, "valid", run.token_col, run.tag_col)

    hyper = dict(lr=run.lr, beta1=run.beta1, beta2=run.beta2, eps=run.eps, weight_decay=run.weight_decay)
    if resume and last_path.exists():
        state = restore(last_path)
        if dict(state.model.run.to_dict(), epochs=None) != dict(run.to_dict(), epochs=None):
            log.warning("resuming with a config that differs from the checkpoint; using the new config")
        model = Model(run, state.model.enc, state.model.head, state.model.params)
        opt = state.opt or OptimizerState.for_params(model.params, **hyper)
        start, best, rng = state.epoch, state.best, state.rng or make_rng([run.seed, 2])
    else:
        model = init_model(run, build_encoders(train_corpus, run.min_freq, run.max_vocab, run.max_offset))
        opt = OptimizerState.for_params(model.params, **hyper)
        start, best, rng = 0, None, make_rng([run.seed, 2])
        if log_path.exists():
            log_path.unlink()

    history: list[dict] = []
    if run.epochs == 0 or start >= run.epochs:
        if not last_path.exists() or not resume:
            save_model(last_path, model, opt, epoch=start, best=best, rng=rng)
        return TrainResult(out, last_path, best_path if best_path.exists() else None, log_path, history)

    metric = tasks.METRIC[run.task]
    cpu0 = time.process_time()
    wall0 = time.perf_counter()
    stopped = reached = False
    for epoch in range(start, run.epochs):
        loss_sum, n_batches = 0.0, 0
        for batch in make_batches(train_corpus, model.enc, run.batch_size, run.max_len,
                                  seed=run.seed, epoch=epoch):
            tape = ad.Tape()
            watched = {k: tape.watch(v) for k, v in model.params.items()}
            try:
                res = forward(model, watched, batch, training=True, rng=rng)
                total = regularized_loss(res.loss, watched, run.model, run.l2_ternary)
                grads = ad.backward(tape, total)
            except tasks.NoMaskedTokens:
                continue
            except ad.NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch + 1}: {e}; last good checkpoint kept at {last_path}") from e
            adam_step(model.params, {k: grads.of(t) for k, t in watched.items()}, opt)
            loss_sum += float(total.data)
            n_batches += 1
            if run.time_budget_s is not None and time.process_time() - cpu0 > run.time_budget_s:
                stopped = True
                break
        report = evaluate_corpus(model, valid_corpus, "valid")
        wall = round(time.perf_counter() - wall0, 3)
        lines = [
            {"epoch": epoch + 1, "split": "train", "metric": "loss",
             "value": loss_sum / max(n_batches, 1), "wallclock_s": wall},
            {"epoch": epoch + 1, "split": "valid", "metric": metric, "value": report["value"], "wallclock_s": wall},
        ]
        with open(log_path, "a", encoding="utf-8") as fh:
            for line in lines:
                fh.write(json.dumps(line, sort_keys=True) + "\n")
        history.extend(lines)
        log.info("epoch %d: train loss %.4f, valid %s %.4f", epoch + 1, lines[0]["value"], metric, report["value"])
        if _improved(metric, report["value"], best):
            best = {"metric": metric, "value": report["value"], "epoch": epoch + 1}
            save_model(best_path, model, opt, epoch=epoch + 1, best=best, rng=rng)
        save_model(last_path, model, opt, epoch=epoch + 1, best=best, rng=rng)
        reached = _reached(metric, report["value"], run.target_metric)
        if stopped or reached:
            break
    return TrainResult(out, last_path, best_path if best_path.exists() else None, log_path, history,
                       stopped, reached)


# --------------------------------------------------------------------------- evaluation and inspection


def evaluate(ckpt_path, data_path, task: str, split: str = "test") -> dict:
    state = restore(ckpt_path)
    run = state.model.run
    if task != run.task:
        raise IncompatibleCheckpoint(f"checkpoint was trained for task {run.task!r}, not {task!r}")
    corpus = load_corpus(task, data_path, split, run.token_col, run.tag_col)
    return evaluate_corpus(state.model, corpus, split)


def inspect_sentence(model: Model, sentence: str) -> list[str]:
    """Most probable head per word and channel; the root marginal when the model has a root."""
    tokens = sentence.split()
    if not tokens:
        raise ValueError("inspect needs a non-empty sentence")
    out = run_inference(model.params, model.enc.vocab.encode(tokens), model.config)
    lines = []
    if out.qh is not None:
        lines += format_dependencies(tokens, out.qh, model.config)
    if out.root_rep is not None:
        lines.append("root: " + " ".join(f"{v:.4f}" for v in out.root_rep))
    return lines


def inspect(ckpt_path, sentence: str) -> list[str]:
    return inspect_sentence(restore(ckpt_path).model, sentence)
