"""Joint training: cross-entropy plus queue and hard-negative contrastive terms.

Per step: query encoder on questions, key encoder on reference summaries and
drawn hard negatives, loss per ablation mode, optimizer step on the query
encoder and decoder, momentum update of the key encoder, then the freshly
re-encoded reference keys are pushed into the negative queue.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from medqsum import rng
from medqsum.contrastive import NegativeQueue, cosine_similarity, hcl_loss, scl_loss, total_loss
from medqsum.corpus import Dataset, QuestionPair, SplitSet
from medqsum.evaluation import evaluate
from medqsum.model import (
    ModelConfig,
    Seq2Seq,
    Summarizer,
    Tokenizer,
    build_model,
    pool_representation,
    save_checkpoint,
    sequence_nll,
)
from medqsum.negatives import EmptyHardSet, HardNegativeSet, draw_hard_batch

log = logging.getLogger(__name__)

ABLATIONS = {"full": (True, True), "-s": (False, True), "-h": (True, False), "-s-h": (False, False)}


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, checkpoint=None):
        self.step, self.checkpoint = step, checkpoint
        where = f"; last good weights in {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at step {step}{where}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epochs: int = 15
    patience: int = 3  # epochs without dev improvement before stopping; 0 disables
    m: float = 0.999
    tau: float = 0.07
    l_q: int = 4096
    n_h: int = 128
    X: int = 128
    seed: int = 42
    ablation: str = "full"
    backbone: str = "toy"
    hard_scope: str = "batch"  # "batch": one shared draw per step; "anchor": n_h per question
    strict_infonce: bool = False
    ce_reduction: str = "mean"
    probe_size: int = 64
    probe_hard: int = 8
    embedding_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 4
    feed_forward_dim: int = 128
    max_source_len: int = 64
    max_target_len: int = 32
    dropout: float = 0.1
    pooling: str = "encoder"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {sorted(ABLATIONS)}, got {self.ablation!r}")
        if self.hard_scope not in ("batch", "anchor"):
            raise ValueError(f"hard_scope must be 'batch' or 'anchor', got {self.hard_scope!r}")
        if not 0.0 <= self.m < 1.0:
            raise ValueError("m must be in [0, 1)")
        if self.tau <= 0 or self.l_q < 1 or self.n_h < 1 or self.X < 1 or self.batch_size < 1:
            raise ValueError("tau, l_q, n_h, X and batch_size must be positive")

    @property
    def use_simple(self) -> bool:
        return ABLATIONS[self.ablation][0]

    @property
    def use_hard(self) -> bool:
        return ABLATIONS[self.ablation][1]

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig.from_dict({**asdict(self), "vocab_size": vocab_size})

    # flat "key = value" files ------------------------------------------------

    @classmethod
    def coerce(cls, key: str, value: str):
        types = {f.name: f.type for f in fields(cls)}
        if key not in types:
            raise KeyError(f"unknown config key {key!r}")
        t = types[key]
        if t == "bool":
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"{key}: not a boolean: {value!r}")
        if t == "int":
            return int(value)
        if t == "float":
            return float(value)
        return value

    @classmethod
    def parse(cls, text: str) -> dict:
        out = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key = key.strip()
            out[key] = cls.coerce(key, value.strip())
        return out

    @classmethod
    def from_file(cls, path, overrides: Mapping | None = None) -> "TrainConfig":
        values = cls.parse(Path(path).read_text(encoding="utf-8")) if path else {}
        values.update(overrides or {})
        return cls(**values)

    def dumps(self) -> str:
        return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in asdict(self).items())


KEY_HELP = {
    "learning_rate": "Adam learning rate",
    "batch_size": "pairs per optimizer step",
    "adam_beta1": "Adam beta1",
    "adam_beta2": "Adam beta2",
    "epochs": "maximum number of epochs",
    "patience": "stop after this many epochs without dev ROUGE-1 gain (0 = never)",
    "m": "key-encoder momentum coefficient, in [0, 1)",
    "tau": "contrastive temperature",
    "l_q": "negative queue capacity",
    "n_h": "hard negatives drawn per step (per question with hard_scope=anchor)",
    "X": "hard negatives generated per summary when building the pool",
    "seed": "seed for model init, shuffling and sampling",
    "ablation": "full | -s (no queue loss) | -h (no hard-negative loss) | -s-h (cross-entropy only)",
    "backbone": "toy | external:<registered name>",
    "hard_scope": "batch: one shared hard draw per step | anchor: separate draw per question",
    "strict_infonce": "leave the positive out of the contrastive denominators",
    "ce_reduction": "mean (per target token) | sum (per sequence)",
    "probe_size": "train pairs used for similarity tracking",
    "probe_hard": "hard negatives per probe pair for similarity tracking",
    "embedding_dim": "model width",
    "encoder_layers": "encoder depth",
    "decoder_layers": "decoder depth",
    "attention_heads": "attention heads (must divide embedding_dim)",
    "feed_forward_dim": "feed-forward hidden width",
    "max_source_len": "question length limit in tokens, incl. sentinels",
    "max_target_len": "summary length limit in tokens, incl. sentinels",
    "dropout": "dropout rate",
    "pooling": "encoder | decoder: states pooled for the question representation",
}


@dataclass
class EpochRecord:
    epoch: int
    dev_rouge1: float | None
    sim_hard: float | None
    sim_simple: float | None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    summarizer: Summarizer
    best_epoch: int
    similarity_log: list[EpochRecord]
    steps: list[dict]
    checkpoint: Path | None = None


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch: a seeded permutation cut into chunks."""
    order = rng.stream(seed, "shuffle", epoch).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@contextmanager
def deterministic():
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


@torch.no_grad()
def track_similarities(
    model: Seq2Seq,
    tokenizer: Tokenizer,
    probe: Sequence[QuestionPair],
    queue_snapshot: torch.Tensor | None = None,
    hard: Mapping[str, Sequence[str]] | None = None,
    pooling: str = "encoder",
) -> tuple[float | None, float | None]:
    """Mean cosine similarity of probe questions to hard and simple negatives.

    Hard: each question against its own listed negatives. Simple: against the
    queue snapshot when given, otherwise against the other probe summaries.
    """
    was_training = model.training
    model.eval()
    chq, chq_mask = tokenizer.batch([p.chq for p in probe], tokenizer.max_source_len)
    faq, faq_mask = tokenizer.batch([p.faq for p in probe], tokenizer.max_target_len)
    r_c = _anchor(model, chq, chq_mask, faq, faq_mask, pooling)

    sim_hard = None
    if hard is not None:
        sims = []
        for i, p in enumerate(probe):
            texts = list(hard.get(p.id, ()))
            if texts:
                r_h = _key_reps(model, tokenizer, texts)
                sims.append(cosine_similarity(r_c[i:i + 1], r_h))
        if sims:
            sim_hard = float(torch.cat(sims).mean())

    if queue_snapshot is not None and len(queue_snapshot):
        sim_simple = float(cosine_similarity(r_c[:, None, :], queue_snapshot[None].to(r_c.dtype)).mean())
    elif len(probe) > 1:
        r_s = pool_representation(model.encode(faq, faq_mask, "key"), faq_mask)
        sims = cosine_similarity(r_c[:, None, :], r_s[None])
        off = ~torch.eye(len(probe), dtype=torch.bool)
        sim_simple = float(sims[off].mean())
    else:
        sim_simple = None
    model.train(was_training)
    return sim_hard, sim_simple


def _anchor(model, chq, chq_mask, faq, faq_mask, pooling, memory=None, dec_states=None):
    if pooling == "decoder":
        if dec_states is None:
            memory = model.encode(chq, chq_mask) if memory is None else memory
            dec_states = model.decoder.states(faq[:, :-1], faq_mask[:, :-1], memory, chq_mask)
        return pool_representation(dec_states, faq_mask[:, :-1])
    memory = model.encode(chq, chq_mask) if memory is None else memory
    return pool_representation(memory, chq_mask)


def _key_reps(model, tokenizer, texts) -> torch.Tensor:
    ids, mask = tokenizer.batch(texts, tokenizer.max_target_len)
    return pool_representation(model.encode(ids, mask, "key"), mask)


class Trainer:
    """Owns model, optimizer, queue and counters for one training run."""

    def __init__(
        self,
        config: TrainConfig,
        train_set: Dataset,
        pool: Mapping[str, HardNegativeSet] | None = None,
        tokenizer: Tokenizer | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        self.config = config
        self.train_set = train_set
        if config.use_hard and pool is None:
            raise ValueError(f"ablation {config.ablation!r} needs a hard-negative pool")
        self._pool = pool
        self.tokenizer = tokenizer or Tokenizer.build(
            [t for p in train_set for t in (p.chq, p.faq)],
            max_source_len=config.max_source_len,
            max_target_len=config.max_target_len,
        )
        self.model = build_model(
            config.model_config(len(self.tokenizer)), config.m, config.backbone, seed=config.seed
        ).to(dtype)
        self.model.encoders.key.eval()
        self.optimizer = torch.optim.Adam(
            self.model.trainable_parameters(),
            lr=config.learning_rate,
            betas=(config.adam_beta1, config.adam_beta2),
        )
        self.queue = NegativeQueue(config.l_q, dtype=dtype)
        self.step_count = 0
        self.counters = {"pool_reads": 0, "queue_reads": 0, "queue_writes": 0}
        self.enqueue_before_momentum = False  # wrong order, exposed for tests only

    @property
    def summarizer(self) -> Summarizer:
        return Summarizer(self.model, self.tokenizer)

    def pool(self) -> Mapping[str, HardNegativeSet]:
        self.counters["pool_reads"] += 1
        return self._pool

    def queue_entries(self) -> torch.Tensor:
        self.counters["queue_reads"] += 1
        return self.queue.entries

    def _hard_keys(self, ids: Sequence[str]) -> tuple[torch.Tensor, list[int]] | None:
        """Hard key representations and the batch rows they belong to.

        Shared scope: (n_h, D) for every row. Anchor scope: (R, n_h, D) for the
        R rows whose own pool is non-empty; the others sit out the hard term.
        """
        cfg = self.config
        seed = rng.derive_seed(cfg.seed, "hard", self.step_count)
        pool = self.pool()
        if cfg.hard_scope == "batch":
            try:
                texts = draw_hard_batch(pool, ids, cfg.n_h, seed).texts
            except EmptyHardSet:
                return None
            return _key_reps(self.model, self.tokenizer, texts), list(range(len(ids)))
        rows, keys = [], []
        for r, i in enumerate(ids):
            try:
                texts = draw_hard_batch(pool, [i], cfg.n_h, seed).texts
            except EmptyHardSet:
                continue
            rows.append(r)
            keys.append(_key_reps(self.model, self.tokenizer, texts))
        return (torch.stack(keys), rows) if rows else None

    def losses(self, pairs: Sequence[QuestionPair]) -> dict:
        """Forward pass for one batch; returns the loss terms (None = skipped)."""
        cfg, tok, model = self.config, self.tokenizer, self.model
        chq, chq_mask = tok.batch([p.chq for p in pairs], cfg.max_source_len)
        faq, faq_mask = tok.batch([p.faq for p in pairs], cfg.max_target_len)
        memory = model.encode(chq, chq_mask, "query")
        dec_states = model.decoder.states(faq[:, :-1], faq_mask[:, :-1], memory, chq_mask)
        l_ce = sequence_nll(model.decoder.lm_head(dec_states), faq[:, 1:], faq_mask[:, 1:], cfg.ce_reduction)
        out = {"l_ce": l_ce, "l_scl": None, "l_hcl": None, "faq": (faq, faq_mask)}
        if not (cfg.use_simple or cfg.use_hard):
            return out
        r_c = _anchor(model, chq, chq_mask, faq, faq_mask, cfg.pooling, memory=memory, dec_states=dec_states)
        r_pos = pool_representation(model.encode(faq, faq_mask, "key"), faq_mask)
        if cfg.use_simple:
            negs = self.queue_entries()
            if len(negs):
                out["l_scl"] = scl_loss(r_c, r_pos, negs, cfg.tau, strict=cfg.strict_infonce)
        if cfg.use_hard:
            hard = self._hard_keys([p.id for p in pairs])
            if hard is not None:
                keys, rows = hard
                out["l_hcl"] = hcl_loss(r_c[rows], r_pos[rows], keys, cfg.tau, strict=cfg.strict_infonce)
        return out

    def _enqueue(self, faq, faq_mask) -> None:
        with torch.no_grad():
            keys = pool_representation(self.model.encode(faq, faq_mask, "key"), faq_mask)
        self.queue.enqueue(F.normalize(keys, dim=-1))
        self.counters["queue_writes"] += 1

    def step(self, pairs: Sequence[QuestionPair]) -> dict:
        self.model.train()
        self.model.encoders.key.eval()
        out = self.losses(pairs)
        loss = total_loss(out["l_ce"], out["l_scl"], out["l_hcl"])
        if not torch.isfinite(loss):
            raise TrainingDiverged(self.step_count)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        if self.enqueue_before_momentum and self.config.use_simple:
            self._enqueue(*out["faq"])
            self.model.momentum_update()
        else:
            self.model.momentum_update()
            if self.config.use_simple:
                self._enqueue(*out["faq"])
        self.step_count += 1
        val = lambda t: None if t is None else float(t.detach())
        return {
            "step": self.step_count,
            "l_ce": val(out["l_ce"]),
            "l_scl": val(out["l_scl"]),
            "l_hcl": val(out["l_hcl"]),
            "l_total": val(loss),
        }

    def similarities(self) -> tuple[float | None, float | None]:
        cfg = self.config
        probe = self.train_set.pairs[: cfg.probe_size]
        hard = None
        if cfg.use_hard:
            pool = self.pool()
            hard = {p.id: pool[p.id].negatives[: cfg.probe_hard] for p in probe if p.id in pool}
        snapshot = self.queue_entries() if cfg.use_simple else None
        return track_similarities(self.model, self.tokenizer, probe, snapshot, hard, cfg.pooling)


def train(
    config: TrainConfig,
    splits: SplitSet,
    pool: Mapping[str, HardNegativeSet] | None = None,
    *,
    out_dir=None,
    log_path=None,
    tokenizer: Tokenizer | None = None,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Run training and return the epoch with the best dev ROUGE-1 F1.

    With ``out_dir`` the best model is written to ``out_dir/best``; on
    divergence the weights from before the failing step go to
    ``out_dir/last-good``.
    """
    cfg = config
    train_set = splits.train
    trainer = Trainer(cfg, train_set, pool if cfg.use_hard else None, tokenizer, dtype)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    steps, epochs = [], []
    best = (-math.inf, 0, 0, None)  # dev score, epoch, step, state dict
    stale = 0

    def emit(record):
        if log_file:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")

    try:
        with deterministic():
            for epoch in range(1, cfg.epochs + 1):
                t0 = time.perf_counter()
                for idx in epoch_batches(len(train_set), cfg.batch_size, cfg.seed, epoch):
                    good = copy.deepcopy(trainer.model.state_dict()) if out_dir else None
                    try:
                        rec = trainer.step([train_set.pairs[i] for i in idx])
                    except TrainingDiverged as e:
                        if out_dir:
                            trainer.model.load_state_dict(good)
                            e.checkpoint = save_checkpoint(out_dir / "last-good", trainer.summarizer, step=e.step)
                        raise TrainingDiverged(e.step, e.checkpoint) from None
                    steps.append(rec)
                    emit({k: v for k, v in rec.items() if v is not None})

                dev_r1 = None
                if len(splits.dev):
                    dev_r1 = evaluate(trainer.summarizer, splits.dev).rouge1_f1
                sim_hard, sim_simple = trainer.similarities()
                erec = EpochRecord(epoch, dev_r1, sim_hard, sim_simple)
                epochs.append(erec)
                emit(erec.to_json())
                log.info("epoch %d: dev R1 %s, sim hard %s, sim simple %s (%.1fs)",
                         epoch, dev_r1, sim_hard, sim_simple, time.perf_counter() - t0)

                score = dev_r1 if dev_r1 is not None else float(epoch)
                if score > best[0]:
                    best = (score, epoch, trainer.step_count, copy.deepcopy(trainer.model.state_dict()))
                    stale = 0
                else:
                    stale += 1
                    if cfg.patience and stale >= cfg.patience:
                        log.info("no dev improvement for %d epochs; stopping", stale)
                        break
    finally:
        if log_file:
            log_file.close()

    _, best_epoch, best_step, best_state = best
    trainer.model.load_state_dict(best_state)
    trainer.model.eval()
    summarizer = trainer.summarizer
    ckpt = None
    if out_dir:
        ckpt = save_checkpoint(out_dir / "best", summarizer, step=best_step,
                               extra={"best_epoch": best_epoch, "seed": cfg.seed})
    return TrainResult(summarizer, best_epoch, epochs, steps, ckpt)
