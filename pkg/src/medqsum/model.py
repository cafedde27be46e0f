"""Toy encoder-decoder summarizer with a momentum-tracked key encoder.

The query encoder feeds the decoder and is trained by gradient descent. The
key encoder has the same structure, starts as an exact copy, never receives
gradients and only moves through :func:`momentum_update`.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
from safetensors.torch import load_file, save_file
from torch import nn

from medqsum.corpus import normalize_text

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ["<pad>", "<unk>", "<s>", "</s>"]
_PIECE = re.compile(r"\w+|[^\w\s]")
_SPACE = "▁"


class CheckpointError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# tokenizer


def pieces(text: str) -> list[str]:
    """Split normalized text into word/punctuation pieces; a leading ``▁``
    marks pieces preceded by a space (or starting the text)."""
    text = normalize_text(text)
    out = []
    for m in _PIECE.finditer(text):
        start = m.start()
        out.append((_SPACE if start == 0 or text[start - 1] == " " else "") + m.group())
    return out


class Tokenizer:
    def __init__(self, tokens: Sequence[str], max_source_len: int = 64, max_target_len: int = 32):
        if list(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.max_source_len = max_source_len
        self.max_target_len = max_target_len

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 1, **kwargs) -> "Tokenizer":
        counts = Counter(p for t in texts for p in pieces(t))
        vocab = sorted((p for p, c in counts.items() if c >= min_freq), key=lambda p: (-counts[p], p))
        return cls(SPECIALS + vocab, **kwargs)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def vocab_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.itos, ensure_ascii=False).encode("utf-8")).hexdigest()

    def tokenize(self, text: str, max_len: int | None = None) -> list[int]:
        """``[BOS] + ids + [EOS]``, truncated to ``max_len`` (default: source limit)."""
        max_len = max_len or self.max_source_len
        ids = [self.stoi.get(p, UNK) for p in pieces(text)]
        if len(ids) > max_len - 2:
            log.debug("truncating %d pieces to %d", len(ids), max_len - 2)
            ids = ids[: max_len - 2]
        return [BOS] + ids + [EOS]

    def detokenize(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i] if 0 <= i < len(self.itos) else SPECIALS[UNK])
        return "".join(out).replace(_SPACE, " ").strip()

    def batch(self, texts: Sequence[str], max_len: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Right-padded id tensor and boolean mask (True = real token)."""
        seqs = [self.tokenize(t, max_len) for t in texts]
        width = max(len(s) for s in seqs)
        ids = torch.full((len(seqs), width), PAD, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        return ids, ids != PAD

    def to_json(self) -> dict:
        return {"tokens": self.itos, "max_source_len": self.max_source_len, "max_target_len": self.max_target_len}

    @classmethod
    def from_json(cls, obj: dict) -> "Tokenizer":
        return cls(obj["tokens"], obj["max_source_len"], obj["max_target_len"])


# --------------------------------------------------------------------------
# network


@dataclass
class ModelConfig:
    vocab_size: int
    embedding_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 4
    feed_forward_dim: int = 128
    max_source_len: int = 64
    max_target_len: int = 32
    dropout: float = 0.0
    pooling: str = "encoder"  # or "decoder": anchor pooled from decoder states

    def __post_init__(self):
        dims = (self.vocab_size, self.embedding_dim, self.attention_heads, self.feed_forward_dim,
                self.max_source_len, self.max_target_len)
        if min(dims) < 1 or self.encoder_layers < 0 or self.decoder_layers < 0:
            raise ValueError(f"model dimensions must be positive: {self}")
        if self.embedding_dim % self.attention_heads:
            raise ValueError("embedding_dim must be divisible by attention_heads")
        if self.pooling not in ("encoder", "decoder"):
            raise ValueError(f"pooling must be 'encoder' or 'decoder', got {self.pooling!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return table


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads, self.head_dim = heads, dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, memory, key_mask=None, causal=False):
        B, T, D = x.shape
        S = memory.shape[1]
        q = self.q(x).view(B, T, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(memory).view(B, S, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(memory).view(B, S, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(T, S, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        return self.out((attn @ v).transpose(1, 2).reshape(B, T, D))


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, hidden: int, dropout: float):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(hidden, dim))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embedding_dim
        self.attn = MultiHeadAttention(d, cfg.attention_heads, cfg.dropout)
        self.ff = FeedForward(d, cfg.feed_forward_dim, cfg.dropout)
        self.norm1, self.norm2 = nn.LayerNorm(d), nn.LayerNorm(d)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        x = self.norm1(x + self.drop(self.attn(x, x, mask)))
        return self.norm2(x + self.drop(self.ff(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embedding_dim
        self.self_attn = MultiHeadAttention(d, cfg.attention_heads, cfg.dropout)
        self.cross_attn = MultiHeadAttention(d, cfg.attention_heads, cfg.dropout)
        self.ff = FeedForward(d, cfg.feed_forward_dim, cfg.dropout)
        self.norm1, self.norm2, self.norm3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, y_mask, memory, memory_mask):
        y = self.norm1(y + self.drop(self.self_attn(y, y, y_mask, causal=True)))
        y = self.norm2(y + self.drop(self.cross_attn(y, memory, memory_mask)))
        return self.norm3(y + self.drop(self.ff(y)))


class Encoder(nn.Module):
    """Token embedding + sinusoidal positions + post-norm self-attention layers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.embedding_dim, padding_idx=PAD)
        self.register_buffer("positions", sinusoidal_positions(cfg.max_source_len, cfg.embedding_dim).float(),
                             persistent=False)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.encoder_layers))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, ids, mask):
        x = self.drop(self.embed(ids) + self.positions[: ids.shape[1]].to(self.embed.weight.dtype))
        for layer in self.layers:
            x = layer(x, mask)
        return x


class EncoderPair(nn.Module):
    """Query encoder (trained) and key encoder (momentum copy)."""

    def __init__(self, cfg: ModelConfig, m: float = 0.999):
        super().__init__()
        if not 0.0 <= m < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {m}")
        self.m = m
        self.query = Encoder(cfg)
        self.key = copy.deepcopy(self.query)
        for p in self.key.parameters():
            p.requires_grad_(False)

    def encode(self, ids, mask, which: str = "query"):
        if which == "query":
            return self.query(ids, mask)
        if which == "key":
            with torch.no_grad():
                return self.key(ids, mask)
        raise ValueError(f"which must be 'query' or 'key', got {which!r}")

    def sync_key(self) -> None:
        self.key.load_state_dict(self.query.state_dict())


@torch.no_grad()
def momentum_update(pair: EncoderPair, m: float | None = None) -> EncoderPair:
    """theta_k <- m * theta_k + (1 - m) * theta_q, elementwise, in place."""
    m = pair.m if m is None else m
    if not 0.0 <= m < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {m}")
    q_params = dict(pair.query.named_parameters())
    k_params = dict(pair.key.named_parameters())
    if q_params.keys() != k_params.keys():
        raise ValueError("query and key encoders have different parameter structure")
    for name, pk in k_params.items():
        pq = q_params[name]
        if pq.shape != pk.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(pq.shape)} vs {tuple(pk.shape)}")
        pk.mul_(m).add_(pq, alpha=1.0 - m)
    return pair


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.embedding_dim, padding_idx=PAD)
        self.register_buffer("positions", sinusoidal_positions(cfg.max_target_len, cfg.embedding_dim).float(),
                             persistent=False)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        self.drop = nn.Dropout(cfg.dropout)
        self.lm_head = nn.Linear(cfg.embedding_dim, cfg.vocab_size)

    def states(self, tgt_in, tgt_mask, memory, memory_mask):
        y = self.drop(self.embed(tgt_in) + self.positions[: tgt_in.shape[1]].to(self.embed.weight.dtype))
        for layer in self.layers:
            y = layer(y, tgt_mask, memory, memory_mask)
        return y

    def forward(self, tgt_in, tgt_mask, memory, memory_mask):
        return self.lm_head(self.states(tgt_in, tgt_mask, memory, memory_mask))


class Seq2Seq(nn.Module):
    def __init__(self, cfg: ModelConfig, m: float = 0.999):
        super().__init__()
        self.config = cfg
        self.encoders = EncoderPair(cfg, m)
        self.decoder = Decoder(cfg)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def encode(self, ids, mask, which: str = "query"):
        return self.encoders.encode(ids, mask, which)

    def logits(self, src, src_mask, tgt_in, tgt_mask, memory=None):
        if memory is None:
            memory = self.encode(src, src_mask)
        return self.decoder(tgt_in, tgt_mask, memory, src_mask)

    def momentum_update(self) -> None:
        momentum_update(self.encoders)


def pool_representation(hidden: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of ``hidden`` (B, T, D) over positions where ``mask`` (B, T) is True."""
    counts = mask.sum(dim=1)
    if bool((counts == 0).any()):
        raise ValueError("cannot pool a sequence with no unmasked positions")
    w = mask.to(hidden.dtype).unsqueeze(-1)
    return (hidden * w).sum(dim=1) / counts.to(hidden.dtype).unsqueeze(-1)


def sequence_nll(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Negative log-likelihood of ``targets`` under ``logits``.

    ``"sum"``: summed over each sequence's tokens, averaged over the batch.
    ``"mean"``: averaged over all real target tokens.
    """
    if not bool(mask.any()):
        raise ValueError("empty target sequence")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    nll = torch.where(mask, nll, torch.zeros_like(nll))
    if reduction == "sum":
        return nll.sum() / targets.shape[0]
    if reduction == "mean":
        return nll.sum() / mask.sum()
    raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def cross_entropy_loss(model: Seq2Seq, src, src_mask, tgt, tgt_mask, reduction: str = "mean", memory=None):
    """Teacher-forced loss: predict ``tgt[:, 1:]`` from ``tgt[:, :-1]``."""
    logits = model.logits(src, src_mask, tgt[:, :-1], tgt_mask[:, :-1], memory=memory)
    return sequence_nll(logits, tgt[:, 1:], tgt_mask[:, 1:], reduction)


# --------------------------------------------------------------------------
# decoding


class Summarizer:
    """A model plus its tokenizer; produces summaries from questions."""

    def __init__(self, model: Seq2Seq, tokenizer: Tokenizer):
        self.model, self.tokenizer = model, tokenizer

    @torch.no_grad()
    def _memory(self, chqs: Sequence[str]):
        src, mask = self.tokenizer.batch(chqs, self.tokenizer.max_source_len)
        return self.model.encode(src, mask), mask

    def _step_logp(self, prefix, memory, mem_mask):
        tgt_mask = torch.ones_like(prefix, dtype=torch.bool)
        logits = self.model.decoder(prefix, tgt_mask, memory, mem_mask)[:, -1]
        return torch.log_softmax(logits.double(), dim=-1)

    @torch.no_grad()
    def greedy(self, chqs: Sequence[str]) -> list[str]:
        was_training = self.model.training
        self.model.eval()
        memory, mem_mask = self._memory(chqs)
        B = len(chqs)
        prefix = torch.full((B, 1), BOS, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        for _ in range(self.tokenizer.max_target_len - 1):
            nxt = self._step_logp(prefix, memory, mem_mask).argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
            prefix = torch.cat([prefix, nxt[:, None]], dim=1)
            done |= nxt == EOS
            if bool(done.all()):
                break
        self.model.train(was_training)
        return [self.tokenizer.detokenize(row[1:].tolist()) for row in prefix]

    @torch.no_grad()
    def beam(self, chq: str, width: int) -> str:
        """Beam search; the finished hypothesis with the best mean token
        log-probability wins, earlier finish on ties."""
        if width < 1:
            raise ValueError("beam width must be >= 1")
        was_training = self.model.training
        self.model.eval()
        memory, mem_mask = self._memory([chq])
        live = [([BOS], 0.0)]
        finished = []  # (normalized score, order, tokens)
        for _ in range(self.tokenizer.max_target_len - 1):
            prefix = torch.tensor([toks for toks, _ in live], dtype=torch.long)
            logp = self._step_logp(prefix, memory.expand(len(live), -1, -1), mem_mask.expand(len(live), -1))
            cands = []
            for h, (toks, score) in enumerate(live):
                top = torch.topk(logp[h], min(width, logp.shape[-1]))
                for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                    cands.append((score + lp, h, tok))
            cands.sort(key=lambda c: (-c[0], c[1], c[2]))
            live = []
            for score, h, tok in cands[:width]:
                toks = [*prefix[h].tolist(), tok]
                if tok == EOS:
                    finished.append((score / (len(toks) - 1), len(finished), toks))
                else:
                    live.append((toks, score))
            if not live:
                break
        for toks, score in live:
            finished.append((score / (len(toks) - 1), len(finished), toks))
        self.model.train(was_training)
        best = max(finished, key=lambda f: (f[0], -f[1]))
        return self.tokenizer.detokenize(best[2][1:])

    def generate_summary(self, chq: str, strategy: str = "greedy", width: int = 4) -> str:
        if strategy == "greedy":
            return self.greedy([chq])[0]
        if strategy == "beam":
            return self.beam(chq, width)
        raise ValueError(f"unknown decoding strategy {strategy!r}")

    def summarize_many(self, chqs: Sequence[str], strategy: str = "greedy", width: int = 4, batch_size: int = 32) -> list[str]:
        if strategy == "beam":
            return [self.beam(c, width) for c in chqs]
        out = []
        for i in range(0, len(chqs), batch_size):
            out += self.greedy(chqs[i:i + batch_size])
        return out


# --------------------------------------------------------------------------
# backbones and checkpoints

BACKBONES: dict[str, Callable[..., Seq2Seq]] = {}


def register_backbone(name: str, factory: Callable[..., Seq2Seq]) -> None:
    """Make ``backbone = external:<name>`` resolve to ``factory(cfg, m)``."""
    BACKBONES[name] = factory


def build_model(cfg: ModelConfig, m: float = 0.999, backbone: str = "toy", seed: int | None = None) -> Seq2Seq:
    if seed is not None:
        torch.manual_seed(seed)
    if backbone == "toy":
        return Seq2Seq(cfg, m)
    if backbone.startswith("external:"):
        name = backbone.split(":", 1)[1]
        if name not in BACKBONES:
            raise KeyError(f"no backbone registered under {name!r}; use register_backbone()")
        return BACKBONES[name](cfg, m)
    raise ValueError(f"unknown backbone {backbone!r}")


def save_checkpoint(path, summarizer: Summarizer, *, step: int, extra: dict | None = None) -> Path:
    """Write ``manifest.json``, ``vocab.json`` and ``model.safetensors`` into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    model, tok = summarizer.model, summarizer.tokenizer
    tensors = {k: v.detach().cpu().clone().contiguous() for k, v in model.state_dict().items()}
    save_file(tensors, str(path / "model.safetensors"))
    (path / "vocab.json").write_text(json.dumps(tok.to_json(), ensure_ascii=False) + "\n", encoding="utf-8")
    manifest = {
        "backbone": "toy",
        "config": asdict(model.config),
        "momentum": model.encoders.m,
        "vocab_hash": tok.vocab_hash,
        "step": step,
        **(extra or {}),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    try:
        return json.loads((Path(path) / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint manifest in {path}: {e}") from e


def load_checkpoint(path) -> Summarizer:
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("backbone", "toy") != "toy":
        raise CheckpointError(f"checkpoint backbone {manifest['backbone']!r} is not loadable as a toy model")
    tok = Tokenizer.from_json(json.loads((path / "vocab.json").read_text(encoding="utf-8")))
    if tok.vocab_hash != manifest["vocab_hash"]:
        raise CheckpointError("vocabulary does not match the checkpoint manifest")
    cfg = ModelConfig.from_dict(manifest["config"])
    if cfg.vocab_size != len(tok):
        raise CheckpointError(f"config vocab_size {cfg.vocab_size} != vocabulary size {len(tok)}")
    model = Seq2Seq(cfg, manifest.get("momentum", 0.999))
    model.load_state_dict(load_file(str(path / "model.safetensors")))
    model.eval()
    return Summarizer(model, tok)
