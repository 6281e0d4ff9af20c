"""Pretraining (whole-entity masked LM) and fine-tuning (masked seq2seq) loops."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from herbgen import metrics
from herbgen.compute import Adam
from herbgen.encoding import POSITION_SCHEMES, EncodedExample, build_finetune_example, build_pretrain_example, collate
from herbgen.errors import DataError
from herbgen.generation import GenerationConfig, Generator
from herbgen.kg import KNOWLEDGE_MODES, KnowledgeGraph
from herbgen.model import ModelConfig, ModelParams, Transformer, init_from_pretrained, save_checkpoint
from herbgen.vocab import EntityRegistry, Vocabulary

logger = logging.getLogger(__name__)

# stream id separating validation masks from per-epoch training masks
_VALID_STREAM = 1_000_003


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "finetune"
    batch_size: int = 16
    epochs: int = 40
    lr: float = 1e-5
    seed: int = 0
    max_len: int = 256
    mask_rate: float = 0.15
    knowledge_mode: str = "all"
    eval_every: int = 1
    max_grad_norm: float | None = None
    knowledge_positions: str = "sequential"

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ValueError("batch_size, epochs and eval_every must be at least 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.knowledge_mode not in KNOWLEDGE_MODES:
            raise ValueError(f"knowledge_mode must be one of {KNOWLEDGE_MODES}")
        if self.knowledge_positions not in POSITION_SCHEMES:
            raise ValueError(f"knowledge_positions must be one of {POSITION_SCHEMES}")


@dataclass
class Record:
    symptom: str
    herbs: list[str]


def load_records(path: str | Path) -> list[Record]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(Record(str(obj["symptom"]), [str(h) for h in obj["herbs"]]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return out


def save_records(records: Sequence[Record], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"symptom": r.symptom, "herbs": r.herbs}, ensure_ascii=False) + "\n")


class TrainingLog:
    """JSON-lines log with a fixed field set; missing metrics are null."""

    FIELDS = ("epoch", "split", "loss", "precision", "recall", "f1")

    def __init__(self, path: str | Path | None = None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("", encoding="utf-8")

    def __call__(self, **row) -> None:
        row = {k: row.get(k) for k in self.FIELDS}
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        logger.info("%s", json.dumps(row, sort_keys=True))

    def series(self, split: str, key: str = "loss") -> list[float]:
        return [r[key] for r in self.rows if r["split"] == split]


def _example_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _mean_loss(model: Transformer, examples: Sequence[EncodedExample], batch_size: int) -> float:
    scored = [ex for ex in examples if ex.loss_positions.any()]
    total = 0.0
    for i in range(0, len(scored), batch_size):
        chunk = scored[i : i + batch_size]
        total += model.loss(collate(chunk)) * len(chunk)
    return total / len(scored)


def _meta(vocab: Vocabulary, registry: EntityRegistry | None, phase: str, **extra) -> dict:
    return {"vocab": list(vocab.tokens), "herbs": sorted(registry.herbs) if registry else [],
            "phase": phase, **extra}


@dataclass
class TrainResult:
    best: ModelParams
    last: ModelParams
    log: TrainingLog
    best_epoch: int


def pretrain(
    corpus: Sequence[str],
    vocab: Vocabulary,
    registry: EntityRegistry | None,
    model_config: ModelConfig,
    config: TrainConfig,
    valid_corpus: Sequence[str] = (),
    out_dir: str | Path | None = None,
    log: TrainingLog | None = None,
) -> TrainResult:
    """Masked-LM training; the checkpoint with the lowest validation loss is kept.

    Without a validation corpus the training loss drives selection.
    """
    if not config.mask_rate > 0:
        raise DataError("mask_rate must be positive for pretraining (the loss is undefined otherwise)")
    lines = [line for line in corpus if vocab.encode(line)]
    if not lines:
        raise DataError("no corpus line is long enough to mask")
    log = log or TrainingLog()
    params = ModelParams.init(model_config, config.seed, _meta(vocab, registry, "pretrain"))
    model = Transformer(params)
    opt = Adam(lr=config.lr, max_grad_norm=config.max_grad_norm)
    max_len = min(config.max_len, model_config.max_len)

    valid = [build_pretrain_example(t, config.mask_rate, vocab, registry,
                                    _example_rng(config.seed, _VALID_STREAM, i), max_len)
             for i, t in enumerate(line for line in valid_corpus if vocab.encode(line))]
    best, best_score, best_epoch = params.copy(), float("inf"), 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in _batches(len(lines), config.batch_size, config.seed, epoch):
            exs = [build_pretrain_example(lines[i], config.mask_rate, vocab, registry,
                                          _example_rng(config.seed, epoch, int(i)), max_len) for i in idx]
            loss, grads = model.loss_and_grads(collate(exs, vocab.pad_id))
            opt.step(params.tensors, grads)
            losses.append(loss)
        train_loss = float(np.mean(losses))
        log(epoch=epoch, split="train", loss=train_loss)
        if epoch % config.eval_every and epoch != config.epochs:
            continue
        score = train_loss
        if valid:
            score = _mean_loss(model, valid, config.batch_size)
            log(epoch=epoch, split="valid", loss=score)
        if score < best_score:
            best, best_score, best_epoch = params.copy(), score, epoch
    result = TrainResult(best=best, last=params, log=log, best_epoch=best_epoch)
    if out_dir is not None:
        _persist(result, Path(out_dir), "pretrain")
    return result


def _persist(result: TrainResult, out_dir: Path, phase: str) -> dict[str, str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    return {
        f"{phase}_best.ckpt": save_checkpoint(result.best, out_dir / f"{phase}_best.ckpt"),
        f"{phase}_last.ckpt": save_checkpoint(result.last, out_dir / f"{phase}_last.ckpt"),
    }


def evaluate_records(
    generator: Generator, records: Sequence[Record], gen_config: GenerationConfig
) -> tuple[list[dict], metrics.Aggregate]:
    """Decode every record and score it against its reference herbs."""
    rows, results = [], []
    outputs = generator.generate_many([r.symptom for r in records], gen_config)
    for rec, herbs in zip(records, outputs):
        rows.append({"symptom": rec.symptom, "generated": herbs, "reference": rec.herbs})
        results.append(metrics.score(herbs, rec.herbs))
    return rows, metrics.aggregate(results)


def _check_herbs(records: Sequence[Record], vocab: Vocabulary) -> None:
    for rec in records:
        if not rec.herbs:
            raise DataError(f"record {rec.symptom!r} has no herbs")
        for herb in rec.herbs:
            ids = vocab.encode(herb)
            if not ids or vocab.unk_id in ids:
                raise DataError(f"herb {herb!r} is not tokenizable with this vocabulary")


def finetune(
    train: Sequence[Record],
    vocab: Vocabulary,
    registry: EntityRegistry | None,
    kg: KnowledgeGraph | None,
    model_config: ModelConfig,
    config: TrainConfig,
    init: ModelParams | None = None,
    valid: Sequence[Record] = (),
    out_dir: str | Path | None = None,
    log: TrainingLog | None = None,
    on_epoch: Callable[[int, Transformer], None] | None = None,
) -> TrainResult:
    """Teacher-forced seq2seq fine-tuning with knowledge-masked inputs.

    Selection keeps the checkpoint with the best validation micro-F1 under
    greedy decoding (later epochs win ties); without validation records the
    lowest training loss wins. In ``random`` knowledge mode the sampled triple
    of every herb is redrawn per example and per epoch.
    """
    if not train:
        raise DataError("empty fine-tuning dataset")
    mode = config.knowledge_mode
    if mode != "none" and (kg is None or len(kg) == 0):
        raise DataError(f"knowledge_mode={mode!r} needs a non-empty knowledge graph")
    _check_herbs(train, vocab)
    log = log or TrainingLog()
    meta = _meta(vocab, registry, "finetune", knowledge_mode=mode,
                 knowledge_positions=config.knowledge_positions)
    if init is not None:
        params = init_from_pretrained(init, model_config, vocab.tokens, config.seed)
        params.meta = meta
    else:
        params = ModelParams.init(model_config, config.seed, meta)
    model = Transformer(params)
    opt = Adam(lr=config.lr, max_grad_norm=config.max_grad_norm)
    max_len = min(config.max_len, model_config.max_len)
    kg_used = None if mode == "none" else kg

    def encode(rec: Record, epoch: int, i: int) -> EncodedExample:
        rng = _example_rng(config.seed, epoch, i) if mode == "random" else None
        return build_finetune_example(rec.symptom, rec.herbs, vocab, kg_used, mode, rng, max_len,
                                      config.knowledge_positions)

    fixed = [encode(r, 0, i) for i, r in enumerate(train)] if mode != "random" else None
    n_trunc = sum(ex.truncated for ex in fixed or [])
    if n_trunc:
        logger.warning("%d training examples had knowledge truncated to fit max_len", n_trunc)
    generator = Generator(model, vocab, registry, kg_used, max_len=max_len,
                          positions=config.knowledge_positions)
    greedy = GenerationConfig(strategy="greedy", knowledge_at_inference=mode != "none")

    best, best_score, best_epoch = params.copy(), -float("inf"), 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in _batches(len(train), config.batch_size, config.seed, epoch):
            exs = [fixed[i] if fixed is not None else encode(train[i], epoch, int(i)) for i in idx]
            loss, grads = model.loss_and_grads(collate(exs, vocab.pad_id))
            opt.step(params.tensors, grads)
            losses.append(loss)
        train_loss = float(np.mean(losses))
        log(epoch=epoch, split="train", loss=train_loss)
        if on_epoch is not None:
            on_epoch(epoch, model)
        if epoch % config.eval_every and epoch != config.epochs:
            continue
        if valid:
            vex = [build_finetune_example(r.symptom, r.herbs, vocab, kg_used, mode,
                                          _example_rng(config.seed, _VALID_STREAM, i), max_len,
                                          config.knowledge_positions)
                   for i, r in enumerate(valid)]
            _, agg = evaluate_records(generator, valid, greedy)
            score = agg.micro.f1
            log(epoch=epoch, split="valid", loss=_mean_loss(model, vex, config.batch_size),
                precision=agg.micro.precision, recall=agg.micro.recall, f1=agg.micro.f1)
        else:
            score = -train_loss
        if score >= best_score:
            best, best_score, best_epoch = params.copy(), score, epoch
    result = TrainResult(best=best, last=params, log=log, best_epoch=best_epoch)
    if out_dir is not None:
        _persist(result, Path(out_dir), "finetune")
    return result

