"""Word-piece vocabulary, tokenizer and a small contextual encoder.

The encoder stands in for a pretrained clinical transformer.  Anything that
provides ``vocab``, ``tokenize`` and a ``forward(ids, mask)`` returning
per-piece vectors (position 0 is the sentence vector) can replace it.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

from .schema import LabelSchema, default_schema

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
CONT = "##"
MARKER_CLOSE = "$"


def marker(label: str) -> str:
    return "@" + label


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    pieces: tuple[str, ...]

    def __post_init__(self):
        if self.pieces[:4] != RESERVED:
            raise ValueError("reserved pieces must occupy indices 0-3")
        if len(set(self.pieces)) != len(self.pieces):
            raise ValueError("duplicate vocabulary pieces")
        object.__setattr__(self, "_index", {p: i for i, p in enumerate(self.pieces)})

    def __len__(self):
        return len(self.pieces)

    def __contains__(self, piece):
        return piece in self._index

    def id(self, piece: str) -> int:
        return self._index.get(piece, 1)

    @property
    def pad_id(self):
        return 0

    @property
    def unk_id(self):
        return 1

    @property
    def cls_id(self):
        return 2

    @property
    def close_id(self):
        return self._index[MARKER_CLOSE]

    def marker_id(self, label: str) -> int:
        return self._index[marker(label)]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(p + "\n" for p in self.pieces), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls(tuple(Path(path).read_text("utf-8").splitlines()))


def build_vocab(
    token_lists: Iterable[Sequence[str]], max_size: int, schema: LabelSchema | None = None
) -> Vocab:
    """Frequency-ranked vocabulary.

    Reserved pieces, then one marker per entity label plus the ``$`` closer,
    then every character seen (word-initial and ``##`` continuation forms) so
    any known-alphabet token can be decomposed, then whole lowercased tokens
    by descending frequency.  ``max_size`` bounds the reserved and learned
    pieces; the markers depend only on the schema and are not counted.
    Frequency ties keep first-occurrence order, so the result depends only
    on corpus order.
    """
    if max_size <= 8:
        raise ValueError("max_size must exceed 8")
    schema = schema or default_schema()
    fixed = list(RESERVED) + [MARKER_CLOSE] + [marker(l) for l in schema.span_labels[1:]]

    words: Counter = Counter()
    chars: Counter = Counter()
    for tokens in token_lists:
        for tok in tokens:
            tok = tok.lower()
            words[tok] += 1
            chars[tok[0]] += 1
            for c in tok[1:]:
                chars[CONT + c] += 1

    pieces = list(fixed)
    seen = set(pieces)
    limit = max_size + len(fixed) - len(RESERVED)
    # Counter.most_common is stable on ties (insertion order)
    for group in (chars, words):
        for piece, _ in group.most_common():
            if len(pieces) >= limit:
                break
            if piece not in seen:
                pieces.append(piece)
                seen.add(piece)
    return Vocab(tuple(pieces))


@dataclass(frozen=True)
class WordPieceSequence:
    piece_ids: tuple[int, ...]
    token_of_piece: tuple[int, ...]  # -1 for [CLS]
    piece_range_of_token: tuple[tuple[int, int], ...]
    truncated: bool = False

    def __len__(self):
        return len(self.piece_ids)

    @property
    def n_tokens(self) -> int:
        return len(self.piece_range_of_token)

    def piece_span(self, start: int, end: int) -> tuple[int, int]:
        return self.piece_range_of_token[start][0], self.piece_range_of_token[end][1]


def split_word(word: str, vocab: Vocab) -> list[int]:
    """Longest-match-first decomposition; [UNK] when no decomposition exists."""
    word = word.lower()
    if word in vocab:
        return [vocab.id(word)]
    out = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            sub = word[start:end] if start == 0 else CONT + word[start:end]
            if sub in vocab:
                found = sub
                break
            end -= 1
        if found is None:
            return [vocab.unk_id]
        out.append(vocab.id(found))
        start = end
    return out


def tokenize(words: Sequence[str], vocab: Vocab, max_length: int | None = None) -> WordPieceSequence:
    """Convert tokens to a [CLS]-prefixed piece sequence with alignment maps.

    With ``max_length`` set, trailing tokens that do not fit are dropped and
    the result is flagged ``truncated``.
    """
    ids = [vocab.cls_id]
    owner = [-1]
    ranges = []
    truncated = False
    for i, w in enumerate(words):
        sub = split_word(w, vocab)
        if max_length is not None and len(ids) + len(sub) > max_length:
            truncated = True
            break
        ranges.append((len(ids), len(ids) + len(sub) - 1))
        ids.extend(sub)
        owner.extend([i] * len(sub))
    return WordPieceSequence(tuple(ids), tuple(owner), tuple(ranges), truncated)


@dataclass
class EncodedSentence:
    cls_embedding: torch.Tensor
    piece_embeddings: torch.Tensor  # (n, d) including position 0


# --------------------------------------------------------------------------
# model


@dataclass
class EncoderConfig:
    dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    layers: int = 2
    max_length: int = 128


class SelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        assert dim % heads == 0
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, mask):
        b, t, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(b, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ v
        return self.out(ctx.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.attn = SelfAttention(cfg.dim, cfg.heads)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.ff = nn.Sequential(nn.Linear(cfg.dim, cfg.ff_dim), nn.GELU(), nn.Linear(cfg.ff_dim, cfg.dim))

    def forward(self, x, mask):
        x = x + self.attn(self.norm1(x), mask)
        return x + self.ff(self.norm2(x))


class ContextEncoder(nn.Module):
    """Pre-norm transformer over word pieces with learned positions."""

    def __init__(self, vocab: Vocab, cfg: EncoderConfig | None = None):
        super().__init__()
        self.vocab = vocab
        self.cfg = cfg or EncoderConfig()
        self.embed = nn.Embedding(len(vocab), self.cfg.dim)
        self.position = nn.Embedding(self.cfg.max_length, self.cfg.dim)
        self.blocks = nn.ModuleList(Block(self.cfg) for _ in range(self.cfg.layers))
        self.norm = nn.LayerNorm(self.cfg.dim)
        nn.init.normal_(self.embed.weight, std=0.1)
        nn.init.normal_(self.position.weight, std=0.1)

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def tokenize(self, words: Sequence[str], strict: bool = False) -> WordPieceSequence:
        seq = tokenize(words, self.vocab, None if strict else self.cfg.max_length)
        if len(seq) > self.cfg.max_length:
            raise SequenceTooLong(f"{len(seq)} pieces exceed {self.cfg.max_length}")
        return seq

    def batch(self, seqs: Sequence[Sequence[int]]):
        """Pad piece-id lists into (ids, mask) tensors."""
        device = self.embed.weight.device
        width = max(len(s) for s in seqs)
        if width > self.cfg.max_length:
            raise SequenceTooLong(f"{width} pieces exceed {self.cfg.max_length}")
        ids = torch.zeros(len(seqs), width, dtype=torch.long, device=device)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
        return ids, ids != self.vocab.pad_id

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.embed(ids) + self.position(pos)[None]
        for block in self.blocks:
            x = block(x, mask)
        return self.norm(x)

    def encode(self, seq: WordPieceSequence) -> EncodedSentence:
        ids, mask = self.batch([seq.piece_ids])
        out = self(ids, mask)[0]
        return EncodedSentence(out[0], out)


def encode(seq: WordPieceSequence, encoder: ContextEncoder) -> EncodedSentence:
    return encoder.encode(seq)
