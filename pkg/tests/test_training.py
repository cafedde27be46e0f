import json

import pytest
import torch
import torch.nn.functional as F

from medqsum.entities import build_entity_dictionary
from medqsum.model import pool_representation
from medqsum.negatives import build_negative_pool
from medqsum.training import (
    KEY_HELP,
    TrainConfig,
    Trainer,
    epoch_batches,
    train,
)
from dataclasses import fields

SMALL = dict(embedding_dim=16, encoder_layers=1, decoder_layers=1, attention_heads=2, feed_forward_dim=32,
             batch_size=4, l_q=16, n_h=4, X=4, dropout=0.0, learning_rate=1e-3, probe_size=8, probe_hard=2)


@pytest.fixture(scope="module")
def small_pool(toy_splits, lexicon):
    d = build_entity_dictionary(toy_splits.train, lexicon)
    return build_negative_pool(toy_splits.train, lexicon, d, 4, rng_seed=1)


def test_defaults_and_help():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.adam_beta1, cfg.adam_beta2) == (1e-5, 16, 0.9, 0.999)
    assert (cfg.epochs, cfg.m, cfg.tau, cfg.l_q, cfg.n_h) == (15, 0.999, 0.07, 4096, 128)
    assert set(KEY_HELP) == {f.name for f in fields(TrainConfig)}


def test_config_file_parsing(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nlearning_rate = 0.01\nablation = -s-h  # cross-entropy only\nstrict_infonce = yes\n")
    cfg = TrainConfig.from_file(path, {"epochs": 2})
    assert (cfg.learning_rate, cfg.ablation, cfg.strict_infonce, cfg.epochs) == (0.01, "-s-h", True, 2)
    assert TrainConfig(**TrainConfig.parse(cfg.dumps())) == cfg
    with pytest.raises(KeyError):
        TrainConfig.parse("nonsense = 1")
    with pytest.raises(ValueError):
        TrainConfig(ablation="-x")


def test_epoch_batches_cover_everything():
    batches = epoch_batches(10, 3, seed=1, epoch=2)
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    assert sorted(i for b in batches for i in b) == list(range(10))
    assert [b.tolist() for b in batches] == [b.tolist() for b in epoch_batches(10, 3, 1, 2)]
    assert [b.tolist() for b in batches] != [b.tolist() for b in epoch_batches(10, 3, 1, 3)]


@pytest.mark.parametrize("ablation,simple,hard", [("full", True, True), ("-s", False, True),
                                                  ("-h", True, False), ("-s-h", False, False)])
def test_ablation_switches(toy_splits, small_pool, ablation, simple, hard):
    cfg = TrainConfig(**SMALL, ablation=ablation)
    trainer = Trainer(cfg, toy_splits.train, small_pool if hard else None)
    recs = [trainer.step(toy_splits.train.pairs[i:i + 4]) for i in (0, 4, 8)]
    assert (trainer.counters["queue_reads"] > 0) == simple
    assert (trainer.counters["queue_writes"] > 0) == simple
    assert (trainer.counters["pool_reads"] > 0) == hard
    assert all((r["l_hcl"] is not None) == hard for r in recs)
    assert recs[0]["l_scl"] is None  # queue starts empty
    assert all((r["l_scl"] is not None) == simple for r in recs[1:])
    for r in recs:
        parts = [r["l_ce"]] + [x for x in (r["l_scl"], r["l_hcl"]) if x is not None]
        assert r["l_total"] == pytest.approx(sum(parts), rel=1e-6)


def test_hard_ablation_needs_pool(toy_splits):
    with pytest.raises(ValueError):
        Trainer(TrainConfig(**SMALL), toy_splits.train, None)


@pytest.mark.parametrize("before", [False, True])
def test_queue_receives_keys_from_the_updated_encoder(toy_splits, before):
    cfg = TrainConfig(**{**SMALL, "m": 0.5, "learning_rate": 1e-2}, ablation="-h")
    trainer = Trainer(cfg, toy_splits.train)
    trainer.enqueue_before_momentum = before
    batch = toy_splits.train.pairs[:4]
    trainer.step(batch)
    faq, mask = trainer.tokenizer.batch([p.faq for p in batch], cfg.max_target_len)
    now = F.normalize(pool_representation(trainer.model.encode(faq, mask, "key"), mask), dim=-1)
    match = torch.allclose(trainer.queue.entries, now, atol=1e-6)
    assert match != before


def test_anchor_scope_and_decoder_pooling(toy_splits, small_pool):
    cfg = TrainConfig(**SMALL, hard_scope="anchor", pooling="decoder")
    trainer = Trainer(cfg, toy_splits.train, small_pool)
    rec = trainer.step(toy_splits.train.pairs[:4])
    assert rec["l_hcl"] is not None
    sim_hard, sim_simple = trainer.similarities()
    assert -1.0 <= sim_hard <= 1.0 and -1.0 <= sim_simple <= 1.0


def test_train_writes_logs_and_picks_best(toy_splits, small_pool, tmp_path):
    cfg = TrainConfig(**SMALL, epochs=2, patience=0)
    result = train(cfg, toy_splits, small_pool, out_dir=tmp_path, log_path=tmp_path / "log.jsonl")
    lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert sum("epoch" in l for l in lines) == 2
    assert len([l for l in lines if "step" in l]) == 2 * 20
    assert (tmp_path / "best" / "model.safetensors").is_file()
    assert result.best_epoch in (1, 2) and len(result.similarity_log) == 2


def test_cross_entropy_only_log_has_no_contrastive_terms(toy_splits, tmp_path):
    cfg = TrainConfig(**SMALL, epochs=1, ablation="-s-h")
    train(cfg, toy_splits, None, log_path=tmp_path / "log.jsonl")
    steps = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines() if "step" in l]
    assert steps and all(set(s) == {"step", "l_ce", "l_total"} for s in steps)


def test_divergence_saves_last_good(toy_splits, tmp_path, monkeypatch):
    from medqsum import training

    cfg = TrainConfig(**SMALL, epochs=1, ablation="-s-h")
    calls = {"n": 0}
    original = training.total_loss

    def poisoned(*terms):
        calls["n"] += 1
        loss = original(*terms)
        return loss * float("nan") if calls["n"] == 3 else loss

    monkeypatch.setattr(training, "total_loss", poisoned)
    with pytest.raises(training.TrainingDiverged) as info:
        train(cfg, toy_splits, None, out_dir=tmp_path)
    assert info.value.step == 2
    assert (tmp_path / "last-good" / "manifest.json").is_file()


def test_anchor_scope_skips_rows_without_negatives(toy_splits, small_pool):
    cfg = TrainConfig(**SMALL, hard_scope="anchor")
    trainer = Trainer(cfg, toy_splits.train, small_pool)
    ids = [p.id for p in toy_splits.train.pairs[:8]]
    keys, rows = trainer._hard_keys(ids)
    expected = [r for r, i in enumerate(ids) if len(small_pool[i])]
    assert rows == expected and keys.shape[:2] == (len(expected), cfg.n_h)


def test_one_pair_memorization():
    from medqsum.corpus import Dataset, QuestionPair

    ds = Dataset("one", [QuestionPair("0", "my mom has shingles, can she get the vaccine?", "shingles vaccine?")])
    trainer = Trainer(TrainConfig(**{**SMALL, "learning_rate": 1e-2}, ablation="-s-h"), ds)
    for _ in range(200):
        rec = trainer.step(ds.pairs)
    assert rec["l_ce"] < 0.01
    assert trainer.summarizer.greedy([ds[0].chq]) == [ds[0].faq]
