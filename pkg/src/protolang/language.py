"""Language description branch.

A hybrid prototype (mean of a class's support and query embeddings) is
projected to the decoder width and used as a single-slot cross-attention
memory. Two transformer decoders, one reading each description left to right
and one reading it right to left, predict the description token by token
under teacher forcing. They share the token-embedding module and the output
projection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import END, MAX_LEN, PAD, START, TokenSequence, Vocabulary, detokenize
from .errors import ConfigurationError

log = logging.getLogger(__name__)

DIRECTIONS = ("forward", "backward")
LOSS_NORMS = ("per-description", "paper-sum")


@dataclass
class DecoderConfig:
    layers: int = 2
    hidden: int = 768
    heads: int = 12
    feed_forward: int = 3072
    dropout: float = 0.1
    activation: str = "gelu"
    word_dim: int = 300
    max_len: int = MAX_LEN
    bidirectional: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigurationError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if self.layers < 1:
            raise ConfigurationError("decoder needs at least one layer")
        if self.activation not in ("gelu", "relu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    def to_dict(self):
        return asdict(self)


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(hidden, hidden)
        self.k = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, hidden)

    def forward(self, x, memory=None, allow=None):
        """``allow`` is a (T, S) boolean mask; False entries are not attended to."""
        b, t, h = x.shape
        kv = x if memory is None else memory
        s = kv.shape[1]
        dh = h // self.heads
        q = self.q(x).view(b, t, self.heads, dh).transpose(1, 2)
        k = self.k(kv).view(b, s, self.heads, dh).transpose(1, 2)
        v = self.v(kv).view(b, s, self.heads, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if allow is not None:
            scores = scores.masked_fill(~allow, float("-inf"))
        attn = scores.softmax(dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, t, h))


class DecoderLayer(nn.Module):
    """Masked self-attention, cross-attention, feed-forward; each post-norm residual."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.hidden, cfg.heads)
        self.cross_attn = MultiHeadAttention(cfg.hidden, cfg.heads)
        self.ff = nn.Sequential(
            nn.Linear(cfg.hidden, cfg.feed_forward),
            nn.GELU() if cfg.activation == "gelu" else nn.ReLU(),
            nn.Linear(cfg.feed_forward, cfg.hidden),
        )
        self.norm1 = nn.LayerNorm(cfg.hidden)
        self.norm2 = nn.LayerNorm(cfg.hidden)
        self.norm3 = nn.LayerNorm(cfg.hidden)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, allow):
        x = self.norm1(x + self.drop(self.self_attn(x, allow=allow)))
        x = self.norm2(x + self.drop(self.cross_attn(x, memory)))
        return self.norm3(x + self.drop(self.ff(x)))


class Decoder(nn.Module):
    """One decoding direction: learned positions plus a stack of layers."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.positions = nn.Embedding(cfg.max_len + 2, cfg.hidden)
        nn.init.normal_(self.positions.weight, std=0.02)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers))

    def forward(self, token_vectors, memory):
        t = token_vectors.shape[1]
        x = token_vectors + self.positions.weight[:t]
        allow = causal_mask(t, device=x.device)
        for layer in self.layers:
            x = layer(x, memory, allow)
        return x


class EmbeddingModule(nn.Module):
    """Word-vector table (vocab x word_dim) followed by a projection to the decoder width."""

    def __init__(self, vocab_size: int, word_dim: int, hidden: int):
        super().__init__()
        self.table = nn.Embedding(vocab_size, word_dim)
        nn.init.normal_(self.table.weight, std=0.02)
        self.proj = nn.Linear(word_dim, hidden)

    def forward(self, tokens):
        return self.proj(self.table(tokens))


class DecoderStack(nn.Module):
    def __init__(self, vocab_size: int, embedding_dim: int, cfg: DecoderConfig):
        super().__init__()
        self.config = cfg
        self.vocab_size = vocab_size
        self.embedding = EmbeddingModule(vocab_size, cfg.word_dim, cfg.hidden)
        self.proto_proj = nn.Linear(embedding_dim, cfg.hidden)
        self.forward_decoder = Decoder(cfg)
        self.backward_decoder = Decoder(cfg) if cfg.bidirectional else None
        self.output = nn.Linear(cfg.hidden, vocab_size)

    @property
    def bidirectional(self) -> bool:
        return self.backward_decoder is not None

    def decoder_for(self, direction: str) -> Decoder:
        if direction == "forward":
            return self.forward_decoder
        if direction == "backward" and self.backward_decoder is not None:
            return self.backward_decoder
        raise ConfigurationError(f"decoder stack has no {direction!r} decoder")


def build_decoder_stack(vocab_size: int, embedding_dim: int, cfg: DecoderConfig, seed: int | None = None,
                        word_vectors: torch.Tensor | np.ndarray | None = None) -> DecoderStack:
    """Construct a decoder stack; with ``seed`` its initialization leaves the global RNG untouched."""
    if seed is None:
        stack = DecoderStack(vocab_size, embedding_dim, cfg)
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            stack = DecoderStack(vocab_size, embedding_dim, cfg)
    if word_vectors is not None:
        vec = torch.as_tensor(np.asarray(word_vectors), dtype=torch.float32)
        if tuple(vec.shape) != (vocab_size, cfg.word_dim):
            raise ConfigurationError(f"word vectors {tuple(vec.shape)} do not match ({vocab_size}, {cfg.word_dim})")
        with torch.no_grad():
            stack.embedding.table.weight.copy_(vec)
    return stack


def load_word_vectors(path, vocab: Vocabulary, dim: int = 300, seed: int = 0) -> tuple[np.ndarray, int]:
    """Read a whitespace-separated ``token v1 ... vdim`` file into a vocab-aligned table.

    Tokens absent from the file (and reserved tokens) get N(0, 0.02^2) rows.
    Returns the table and the number of vocabulary tokens found in the file.
    """
    rng = np.random.default_rng(seed)
    table = rng.normal(0.0, 0.02, size=(len(vocab), dim)).astype(np.float32)
    found = 0
    with Path(path).open(encoding="utf8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            tok = parts[0]
            if tok not in vocab.stoi or vocab.stoi[tok] < 4:
                continue
            if len(parts) - 1 != dim:
                raise ConfigurationError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            table[vocab.stoi[tok]] = np.asarray(parts[1:], dtype=np.float32)
            found += 1
    return table, found


# --- pieces of the forward pass -----------------------------------------------

def hybrid_prototype(support: torch.Tensor, query: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over the union of one class's support (S, d) and query (Q, d) embeddings."""
    parts = [support] if query is None or query.shape[0] == 0 else [support, query]
    union = torch.cat(parts, dim=0)
    if union.shape[0] == 0:
        raise ValueError("hybrid prototype needs at least one embedding")
    return union.mean(dim=0)


def hybrid_prototypes(support: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
    """Episode-wide version: (N, K, d) and (N, Q, d) -> (N, d)."""
    return torch.cat([support, query], dim=1).mean(dim=1)


def replicate_and_project(prototype: torch.Tensor, n_descriptions: int, projection: nn.Module) -> torch.Tensor:
    """Copy a d-dim prototype once per description, then project each copy."""
    if n_descriptions < 1:
        raise ValueError("n_descriptions must be >= 1")
    return projection(prototype.unsqueeze(0).expand(n_descriptions, -1))


def causal_mask(t: int, direction: str = "forward", device=None) -> torch.Tensor:
    """(T, T) allow-mask: position i attends to positions <= i.

    The backward direction uses the same mask on the reversed sequence.
    """
    if t < 1:
        raise ValueError("mask length must be >= 1")
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    return torch.ones(t, t, dtype=torch.bool, device=device).tril()


def pad_descriptions(seqs: Sequence[TokenSequence | Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-padded (D, T_max) token tensor and the (D,) lengths."""
    rows = [s.tokens if isinstance(s, TokenSequence) else tuple(s) for s in seqs]
    lengths = torch.tensor([len(r) for r in rows], dtype=torch.long)
    out = torch.full((len(rows), int(lengths.max()) if rows else 0), PAD, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, :len(r)] = torch.tensor(r, dtype=torch.long)
    return out, lengths


def reverse_padded(tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each row's first ``length`` entries, keeping padding on the right."""
    t = tokens.shape[1]
    pos = torch.arange(t).unsqueeze(0)
    src = (lengths.unsqueeze(1) - 1 - pos)
    valid = src >= 0
    gathered = tokens.gather(1, src.clamp_min(0))
    return torch.where(valid, gathered, torch.full_like(tokens, PAD))


def decode_logits(tokens: torch.Tensor, conditioning: torch.Tensor, stack: DecoderStack,
                  direction: str = "forward") -> torch.Tensor:
    """Unnormalized next-token scores (B, T, V).

    ``tokens`` are already in the direction's reading order (reverse them
    first for ``backward``). ``conditioning`` holds one projected prototype
    row (B, hidden) per sequence, used as a length-1 memory.
    """
    if tokens.numel() == 0 or bool((tokens != PAD).sum(dim=1).eq(0).any()):
        raise ValueError("cannot decode an all-padding sequence")
    decoder = stack.decoder_for(direction)
    hidden = decoder(stack.embedding(tokens), conditioning.unsqueeze(1))
    return stack.output(hidden)


def _direction_nll(logit_rows: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Summed -log p of tokens[:, 1:] from logits at positions [:, :-1], padding excluded."""
    logp = F.log_softmax(logit_rows[:, :-1], dim=-1)
    target = tokens[:, 1:]
    nll = -logp.gather(2, target.unsqueeze(-1)).squeeze(-1)
    return (nll * (target != PAD)).sum()


@dataclass
class LanguageLossTerms:
    forward_sum: torch.Tensor
    backward_sum: torch.Tensor | None
    n_descriptions: int

    def total(self, loss_norm: str = "per-description") -> torch.Tensor:
        if self.backward_sum is None:
            loss = self.forward_sum
        else:
            loss = 0.5 * (self.forward_sum + self.backward_sum)
        if loss_norm == "per-description":
            return loss / max(1, self.n_descriptions)
        if loss_norm == "paper-sum":
            return loss
        raise ConfigurationError(f"unknown loss normalization {loss_norm!r}")


def language_loss_terms(support: torch.Tensor, query: torch.Tensor, descriptions: Sequence[Sequence[TokenSequence]],
                        stack: DecoderStack) -> LanguageLossTerms:
    """Directional negative log-likelihood sums over every sampled description.

    ``support`` is (N, K, d), ``query`` (N, Q, d); ``descriptions[c]`` lists the
    descriptions of class slot ``c``. Slots without descriptions are skipped.
    """
    protos = hybrid_prototypes(support, query)
    rows, cond = [], []
    for slot, descs in enumerate(descriptions):
        if not descs:
            log.warning("class slot %d has no descriptions; skipped in the language loss", slot)
            continue
        rows.extend(descs)
        cond.append(replicate_and_project(protos[slot], len(descs), stack.proto_proj))
    if not rows:
        zero = protos.sum() * 0.0
        return LanguageLossTerms(zero, zero if stack.bidirectional else None, 0)
    tokens, lengths = pad_descriptions(rows)
    conditioning = torch.cat(cond, dim=0)
    fwd = _direction_nll(decode_logits(tokens, conditioning, stack, "forward"), tokens)
    bwd = None
    if stack.bidirectional:
        rev = reverse_padded(tokens, lengths)
        bwd = _direction_nll(decode_logits(rev, conditioning, stack, "backward"), rev)
    return LanguageLossTerms(fwd, bwd, len(rows))


def language_loss(support: torch.Tensor, query: torch.Tensor, descriptions, stack: DecoderStack,
                  loss_norm: str = "per-description") -> torch.Tensor:
    """Half the sum of the forward and backward description NLLs (forward only without a backward decoder)."""
    return language_loss_terms(support, query, descriptions, stack).total(loss_norm)


@torch.no_grad()
def generate_description(prototype: torch.Tensor, stack: DecoderStack, max_len: int = MAX_LEN,
                         vocab: Vocabulary | None = None) -> TokenSequence:
    """Greedy left-to-right decoding from <s> until </s> or ``max_len`` generated tokens."""
    was_training = stack.training
    stack.eval()
    cond = stack.proto_proj(prototype.view(1, -1))
    max_len = min(max_len, stack.config.max_len + 1)
    tokens = [START]
    for _ in range(max_len):
        logit_rows = decode_logits(torch.tensor([tokens]), cond, stack, "forward")
        nxt = int(logit_rows[0, -1].argmax())
        tokens.append(nxt)
        if nxt == END:
            break
    stack.train(was_training)
    if tokens[-1] != END:
        tokens.append(END)
    text = detokenize(tokens, vocab) if vocab is not None else ""
    return TokenSequence(tuple(tokens), text)
