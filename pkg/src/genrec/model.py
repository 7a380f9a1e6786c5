"""Deep-and-narrow encoder-decoder Transformer.

Standard depth and attention width ``d``, but every feed-forward block has a
small inner dimension ``w``. Pre-norm residual blocks, learned absolute
positions, and an output projection tied to the token embedding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = ("recommend", "items", "for", "user")
T5_VOCAB_SIZE = 32128
T5_RELATIVE_BUCKETS = 32


class TrainingError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


# --------------------------------------------------------------------------
# Vocabulary
# --------------------------------------------------------------------------


class Vocabulary:
    """Special tokens, one entry per ID number ``"1".."999"``, prompt words.

    Number tokens are whole entries, so an ID such as ``"13 25 46"`` always
    maps to exactly three vocabulary ids. ``accounting_size`` is the size
    reported for parameter accounting and may exceed the real entry count.
    """

    PAD, EOS, UNK = 0, 1, 2
    SPECIALS = ("<pad>", "</s>", "<unk>")
    MAX_NUMBER = 999

    def __init__(self, words: Sequence[str] = PROMPT_TEMPLATE, accounting_size: int = T5_VOCAB_SIZE):
        self.tokens: List[str] = list(self.SPECIALS) + [str(k) for k in range(1, self.MAX_NUMBER + 1)]
        for w in words:
            if w not in self.tokens:
                self.tokens.append(w)
        self.index: Dict[str, int] = {t: k for k, t in enumerate(self.tokens)}
        if accounting_size < len(self.tokens):
            raise ValueError("accounting_size smaller than the vocabulary")
        self.accounting_size = accounting_size
        self.words = tuple(words)

    def __len__(self) -> int:
        return len(self.tokens)

    def number(self, token: int) -> int:
        """Vocabulary id of ID token ``token`` (1..999)."""
        if not 1 <= token <= self.MAX_NUMBER:
            raise ValueError(f"ID token {token} outside [1, {self.MAX_NUMBER}]")
        return len(self.SPECIALS) + token - 1

    def to_number(self, vocab_id: int) -> int:
        tok = vocab_id - len(self.SPECIALS) + 1
        if not 1 <= tok <= self.MAX_NUMBER:
            raise ValueError(f"vocab id {vocab_id} is not an ID token")
        return tok

    def to_dict(self) -> Dict[str, object]:
        return {"words": list(self.words), "accounting_size": self.accounting_size}

    @classmethod
    def from_dict(cls, d: Dict[str, object]) -> "Vocabulary":
        return cls(tuple(d["words"]), int(d["accounting_size"]))


def tokenize(text: str, vocab: Vocabulary) -> List[int]:
    """Whitespace split; unknown pieces become ``UNK``."""
    return [vocab.index.get(piece, Vocabulary.UNK) for piece in text.split()]


def make_prompt(user_seq: Sequence[int], vocab: Vocabulary) -> List[int]:
    """Template words, the user's ID tokens, then ``EOS``."""
    return [vocab.index[w] for w in vocab.words] + [vocab.number(t) for t in user_seq] + [Vocabulary.EOS]


def make_target(item_seq: Sequence[int], vocab: Vocabulary) -> List[int]:
    return [vocab.number(t) for t in item_seq] + [Vocabulary.EOS]


# --------------------------------------------------------------------------
# Architecture
# --------------------------------------------------------------------------


@dataclass
class ModelConfig:
    d: int = 512
    w: int = 16
    enc_layers: int = 6
    dec_layers: int = 6
    heads: int = 8
    vocab_size: int = T5_VOCAB_SIZE
    max_len: int = 24
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.w < 1:
            raise ValueError("w must be >= 1")

    @classmethod
    def desk(cls, vocab_size: int, **overrides) -> "ModelConfig":
        """Small configuration used for tests and laptop runs."""
        base = dict(d=64, w=16, enc_layers=2, dec_layers=2, heads=8, vocab_size=vocab_size)
        base.update(overrides)
        return cls(**base)


class Attention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mem: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
        # mask: broadcastable to (B, 1, Lq, Lk), True = may attend
        b, lq, d = x.shape
        h = self.heads

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.view(b, -1, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(mem)), split(self.v(mem))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        attn = self.drop(torch.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(b, lq, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d: int, w: int, dropout: float):
        super().__init__()
        self.inner = nn.Linear(d, w, bias=False)
        self.outer = nn.Linear(w, d, bias=False)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.outer(self.drop(F.relu(self.inner(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d)
        self.attn = Attention(cfg.d, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d)
        self.ff = FeedForward(cfg.d, cfg.w, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, mask))
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d)
        self.self_attn = Attention(cfg.d, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d)
        self.cross_attn = Attention(cfg.d, cfg.heads, cfg.dropout)
        self.norm3 = nn.LayerNorm(cfg.d)
        self.ff = FeedForward(cfg.d, cfg.w, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, mem, self_mask, cross_mask):
        h = self.norm1(y)
        y = y + self.drop(self.self_attn(h, h, self_mask))
        y = y + self.drop(self.cross_attn(self.norm2(y), mem, cross_mask))
        return y + self.drop(self.ff(self.norm3(y)))


class Seq2SeqModel(nn.Module):
    """Encoder-decoder Transformer with a tied output projection.

    The decoder input is ``PAD`` (start symbol) followed by the target
    prefix; position ``t`` of the output predicts target token ``t``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d)
        self.enc_pos = nn.Parameter(torch.empty(cfg.max_len, cfg.d))
        self.dec_pos = nn.Parameter(torch.empty(cfg.max_len, cfg.d))
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.enc_norm = nn.LayerNorm(cfg.d)
        self.dec_norm = nn.LayerNorm(cfg.d)
        self.drop = nn.Dropout(cfg.dropout)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        g = torch.Generator().manual_seed(self.cfg.seed)
        for name, p in self.named_parameters():
            if "norm" in name:
                continue  # LayerNorm keeps ones / zeros
            if p.dim() == 2 and name not in ("embed.weight", "enc_pos", "dec_pos"):
                nn.init.normal_(p, 0.0, 1.0 / math.sqrt(p.shape[1]), generator=g)
            else:
                nn.init.normal_(p, 0.0, 0.02, generator=g)

    # -- pieces ------------------------------------------------------------

    def encode(self, src: torch.Tensor, src_mask: torch.Tensor) -> torch.Tensor:
        if src.shape[1] > self.cfg.max_len:
            raise ValueError(f"input length {src.shape[1]} exceeds max_len {self.cfg.max_len}")
        x = self.drop(self.embed(src) + self.enc_pos[: src.shape[1]])
        mask = src_mask[:, None, None, :]
        for layer in self.encoder:
            x = layer(x, mask)
        return self.enc_norm(x)

    def decode(self, dec_in: torch.Tensor, mem: torch.Tensor, src_mask: torch.Tensor) -> torch.Tensor:
        """Final-norm decoder states, shape ``(B, L, d)``."""
        L = dec_in.shape[1]
        if L > self.cfg.max_len:
            raise ValueError(f"decoder length {L} exceeds max_len {self.cfg.max_len}")
        y = self.drop(self.embed(dec_in) + self.dec_pos[:L])
        causal = torch.ones(L, L, dtype=torch.bool, device=dec_in.device).tril()[None, None]
        cross = src_mask[:, None, None, :]
        for layer in self.decoder:
            y = layer(y, mem, causal, cross)
        return self.dec_norm(y)

    def project(self, hidden: torch.Tensor, rows: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Logits against the tied embedding; ``rows`` restricts to a subset
        of vocabulary ids."""
        w = self.embed.weight if rows is None else self.embed.weight[rows]
        return hidden @ w.transpose(-1, -2)

    def forward(self, src, src_mask, dec_in):
        mem = self.encode(src, src_mask)
        return self.project(self.decode(dec_in, mem, src_mask))


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = Vocabulary.PAD) -> Tuple[torch.Tensor, torch.Tensor]:
    """Right-pad to a ``(B, L)`` tensor plus a boolean mask of real tokens."""
    L = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), L), pad, dtype=torch.long)
    mask = torch.zeros(len(seqs), L, dtype=torch.bool)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        mask[r, : len(s)] = True
    return ids, mask


def forward(model: Seq2SeqModel, prompt: Sequence[int], target_prefix: Sequence[int]) -> torch.Tensor:
    """Next-token distribution ``P(o_t | prompt, prefix)`` over the whole
    vocabulary (1-D tensor)."""
    if len(prompt) > model.cfg.max_len:
        raise ValueError(f"input length {len(prompt)} exceeds max_len {model.cfg.max_len}")
    if len(target_prefix) + 1 > model.cfg.max_len:
        raise ValueError(f"prefix length {len(target_prefix)} exceeds max_len - 1")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        src, mask = pad_batch([prompt])
        dec_in = torch.tensor([[Vocabulary.PAD, *target_prefix]], dtype=torch.long)
        logits = model(src, mask, dec_in)[0, -1]
    model.train(was_training)
    return torch.softmax(logits.double(), dim=-1)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 3e-3
    batch_size: int = 64
    epochs: int = 8
    optimizer: str = "adam"  # or "sgd"
    seed: int = 0


def make_batch(pairs: Sequence[Tuple[Sequence[int], Sequence[int]]]):
    src, src_mask = pad_batch([p for p, _ in pairs])
    dec_in, _ = pad_batch([[Vocabulary.PAD, *t[:-1]] for _, t in pairs])
    labels, lab_mask = pad_batch([t for _, t in pairs])
    labels = labels.masked_fill(~lab_mask, -100)
    return src, src_mask, dec_in, labels


def sequence_loss(model: Seq2SeqModel, pairs) -> torch.Tensor:
    """Mean per-token cross-entropy under teacher forcing."""
    src, src_mask, dec_in, labels = make_batch(pairs)
    logits = model(src, src_mask, dec_in)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=-100)


def train(
    model: Seq2SeqModel,
    pairs: Sequence[Tuple[Sequence[int], Sequence[int]]],
    config: TrainConfig = TrainConfig(),
    steps: Optional[int] = None,
) -> List[float]:
    """Teacher-forced training; returns the mean loss of each epoch.

    ``steps`` caps the total number of optimiser steps (the curve then has
    one entry per started epoch).
    """
    for _, t in pairs:
        if not t or t[-1] != Vocabulary.EOS:
            raise ValueError("every target must end with EOS")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if config.optimizer == "sgd":
        opt = torch.optim.SGD(model.parameters(), lr=config.lr)
    elif config.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    model.train()
    curve: List[float] = []
    done = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[k] for k in order[start : start + config.batch_size]]
            opt.zero_grad()
            loss = sequence_loss(model, batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss became {loss.item()} at epoch {epoch}, step {done}")
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
            done += 1
            if steps is not None and done >= steps:
                break
        curve.append(total / count)
        log.info("epoch %d loss %.4f", epoch + 1, curve[-1])
        if steps is not None and done >= steps:
            break
    model.eval()
    return curve


# --------------------------------------------------------------------------
# Parameter accounting
# --------------------------------------------------------------------------


def param_count(config: ModelConfig, accounting: str = "actual") -> int:
    """Closed-form parameter count.

    ``actual`` matches :class:`Seq2SeqModel` exactly. ``t5_compatible``
    counts the layout of a T5-style encoder-decoder of the same shape:
    bias-free RMS norms and one relative-position bias table per stack
    instead of learned absolute positions.
    """
    d, w, V = config.d, config.w, config.vocab_size
    ne, nd = config.enc_layers, config.dec_layers
    if accounting == "actual":
        norm = 2 * d  # LayerNorm scale + bias
        return (
            V * d
            + 2 * config.max_len * d
            + ne * (4 * d * d + 2 * d * w + 2 * norm)
            + nd * (8 * d * d + 2 * d * w + 3 * norm)
            + 2 * norm
        )
    if accounting == "t5_compatible":
        rel_bias = T5_RELATIVE_BUCKETS * config.heads
        return (
            V * d
            + ne * (4 * d * d + 2 * d * w + 2 * d)
            + nd * (8 * d * d + 2 * d * w + 3 * d)
            + 2 * d
            + 2 * rel_bias
        )
    raise ValueError(f"unknown accounting mode {accounting!r}")


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path, model: Seq2SeqModel, vocab: Vocabulary, extra: Optional[Dict[str, object]] = None) -> None:
    torch.save(
        {
            "config": asdict(model.cfg),
            "state": model.state_dict(),
            "vocab": vocab.to_dict(),
            "extra": extra or {},
        },
        Path(path),
    )


def load_checkpoint(path) -> Tuple[Seq2SeqModel, Vocabulary, Dict[str, object]]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    model = Seq2SeqModel(ModelConfig(**blob["config"]))
    model.load_state_dict(blob["state"])
    model.eval()
    return model, Vocabulary.from_dict(blob["vocab"]), blob["extra"]
