import json

import numpy as np
import pytest

from herbgen import training
from herbgen.encoding import build_finetune_example, collate
from herbgen.errors import DataError
from herbgen.kg import KnowledgeGraph
from herbgen.model import ModelConfig, ModelParams, load_checkpoint
from herbgen.training import Record, TrainConfig, TrainingLog, finetune, load_records, pretrain, save_records

from conftest import HERBS, SYMPTOMS, tiny_model

LINE = "人参补气当归补血甘草和中"


def _small(vocab, layers=2, max_len=64):
    return ModelConfig(len(vocab), hidden_size=16, num_layers=layers, num_heads=2, max_len=max_len)


def _records():
    return [Record(s, [HERBS[i % 6], HERBS[(i + 2) % 6]]) for i, s in enumerate(SYMPTOMS)]


def test_config_invariants():
    for bad in ({"batch_size": 0}, {"epochs": 0}, {"lr": 0.0}, {"knowledge_mode": "some"},
                {"phase": "other"}, {"knowledge_positions": "absolute"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_pretrain_one_line_overfits(vocab, registry):
    res = pretrain([LINE], vocab, registry, _small(vocab, max_len=32),
                   TrainConfig(phase="pretrain", epochs=200, lr=1e-2, batch_size=1))
    losses = res.log.series("train")
    assert len(losses) == 200
    assert losses[-1] < 0.1 * losses[0]


def test_pretrain_mask_rate_zero(vocab, registry):
    with pytest.raises(DataError, match="mask_rate"):
        pretrain([LINE], vocab, registry, _small(vocab), TrainConfig(phase="pretrain", mask_rate=0.0))


def test_pretrain_nothing_to_mask(vocab, registry):
    with pytest.raises(DataError):
        pretrain(["", ""], vocab, registry, _small(vocab), TrainConfig(phase="pretrain"))


def test_pretrain_deterministic(vocab, registry, tmp_path):
    cfg = TrainConfig(phase="pretrain", epochs=3, lr=1e-3, batch_size=2)
    corpus = [LINE, "气短乏力", "便血不止"]
    a = pretrain(corpus, vocab, registry, _small(vocab), cfg, out_dir=tmp_path / "a")
    b = pretrain(corpus, vocab, registry, _small(vocab), cfg, out_dir=tmp_path / "b")
    assert a.log.rows == b.log.rows
    for name in ("pretrain_best.ckpt", "pretrain_last.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_pretrain_selects_on_validation(vocab, registry):
    cfg = TrainConfig(phase="pretrain", epochs=4, lr=1e-3, batch_size=2)
    res = pretrain([LINE, "气短乏力"], vocab, registry, _small(vocab), cfg, valid_corpus=["便血不止"])
    valid = res.log.series("valid")
    assert len(valid) == 4
    assert res.best_epoch == 1 + int(np.argmin(valid))


def test_finetune_empty_dataset(vocab, registry, kg):
    with pytest.raises(DataError, match="empty"):
        finetune([], vocab, registry, kg, _small(vocab), TrainConfig())


def test_finetune_needs_kg(vocab, registry):
    for mode in ("all", "random"):
        with pytest.raises(DataError, match="knowledge graph"):
            finetune(_records(), vocab, registry, KnowledgeGraph(), _small(vocab),
                     TrainConfig(knowledge_mode=mode))
    finetune(_records(), vocab, registry, None, _small(vocab),
             TrainConfig(knowledge_mode="none", epochs=1))


def test_finetune_untokenizable_herb(vocab, registry, kg):
    with pytest.raises(DataError, match="tokenizable"):
        finetune([Record("便血", ["龙骨"])], vocab, registry, kg, _small(vocab), TrainConfig())


def test_finetune_mismatched_init(vocab, registry, kg):
    other = ModelConfig(len(vocab) + 1, hidden_size=16, num_layers=2, num_heads=2, max_len=64)
    pre = ModelParams.init(other, 0)
    with pytest.raises(DataError, match="vocabulary"):
        finetune(_records(), vocab, registry, kg, _small(vocab), TrainConfig(epochs=1), init=pre)


def test_finetune_log_and_checkpoints(vocab, registry, kg, tmp_path):
    log = TrainingLog(tmp_path / "log.jsonl")
    cfg = TrainConfig(epochs=3, lr=1e-3, batch_size=4, eval_every=2, max_len=64)
    res = finetune(_records(), vocab, registry, kg, _small(vocab), cfg,
                   valid=_records()[:2], out_dir=tmp_path, log=log)
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert all(set(r) == set(TrainingLog.FIELDS) for r in rows)
    assert [r["epoch"] for r in rows if r["split"] == "valid"] == [2, 3]
    assert all(r["f1"] is not None for r in rows if r["split"] == "valid")
    best = load_checkpoint(tmp_path / "finetune_best.ckpt")
    assert best.meta["knowledge_mode"] == "all" and best.meta["vocab"] == list(vocab.tokens)
    assert res.best_epoch in (2, 3)


def test_finetune_deterministic(vocab, registry, kg, tmp_path):
    cfg = TrainConfig(epochs=2, lr=1e-3, batch_size=4, knowledge_mode="random")
    for d in ("a", "b"):
        finetune(_records(), vocab, registry, kg, _small(vocab), cfg, out_dir=tmp_path / d)
    assert (tmp_path / "a" / "finetune_last.ckpt").read_bytes() == \
        (tmp_path / "b" / "finetune_last.ckpt").read_bytes()


def test_random_mode_resamples_each_epoch(vocab, registry, kg, monkeypatch):
    seen = []
    real = training.build_finetune_example

    def spy(symptom, herbs, *args, **kwargs):
        ex = real(symptom, herbs, *args, **kwargs)
        if symptom == SYMPTOMS[0]:
            seen.append(tuple(ex.token_ids[ex.layout.z_ranges[0][0]:].tolist()))
        return ex

    monkeypatch.setattr(training, "build_finetune_example", spy)
    finetune(_records(), vocab, registry, kg, _small(vocab),
             TrainConfig(epochs=8, batch_size=6, knowledge_mode="random"))
    assert len(seen) == 8
    assert len(set(seen)) > 1


def test_none_mode_has_no_knowledge(vocab, kg):
    ex = build_finetune_example("便血不止", ["人参", "当归"], vocab, None, "none")
    assert ex.layout.z_ranges == () and ex.knowledge_spans == []
    assert len(ex) == ex.layout.closing + 1


def test_teacher_forcing_targets_are_gold(vocab, kg):
    ex = build_finetune_example("便血不止", ["人参", "当归"], vocab, kg)
    rows, targets = ex.loss_rows()
    np.testing.assert_array_equal(targets, ex.token_ids[rows + 1])
    y0, _ = ex.layout.y_range
    assert rows[0] == y0 - 1 and rows[-1] == ex.layout.closing - 1


def test_padding_does_not_leak(vocab, kg):
    m = tiny_model(len(vocab))
    short = build_finetune_example("便血", ["人参"], vocab, kg)
    long = build_finetune_example("气短乏力面色萎黄", ["白术", "当归", "甘草", "黄芪"], vocab, kg)
    alone = m.forward(short)
    hidden = m.encode_batch(collate([short, long]))[0][: len(short)]
    batched = hidden @ m.output_matrix.T
    np.testing.assert_allclose(batched, alone, atol=1e-12)


def test_records_roundtrip(tmp_path):
    save_records(_records(), tmp_path / "r.jsonl")
    assert load_records(tmp_path / "r.jsonl") == _records()
    (tmp_path / "bad.jsonl").write_text('{"symptom": "x"}\n', encoding="utf-8")
    with pytest.raises(DataError, match="bad.jsonl:1"):
        load_records(tmp_path / "bad.jsonl")
