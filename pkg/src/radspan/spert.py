"""Span-based joint entity and relation extraction.

Spans are enumerated over tokens up to ``max_span_width``; a span is
represented by max-pooling the encoder outputs of all word pieces of its
tokens, concatenated with a learned width embedding.  The span classifier
sees that vector plus the [CLS] vector; the relation classifier sees
head span, max-pooled context between the two spans, and tail span.
"""

from __future__ import annotations

import logging
import random
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Document
from .encoder import ContextEncoder, EncodedSentence, WordPieceSequence
from .instances import (
    SentenceInstance,
    assemble,
    batches,
    check_finite,
    group_by_document,
    make_optimizer,
    n_batches,
    seeded_dropout,
    sentence_instances,
    warmup_linear,
)
from .schema import LabelSchema

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    negative_entity_count: int = 100
    negative_relation_count: int = 100
    max_span_width: int = 10
    max_span_pairs: int = 1000
    dropout: float = 0.2
    batch_size: int = 20
    epochs: int = 20
    learning_rate: float = 5e-5
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    seed: int = 0
    width_dim: int = 25

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("seed", "dropout", "weight_decay", "warmup_fraction"):
                continue
            if v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, order=True)
class SpanCandidate:
    start: int
    end: int
    width_bucket: int

    @classmethod
    def of(cls, start: int, end: int, max_width: int) -> "SpanCandidate":
        """Candidate for any span; widths past ``max_width`` share the last bucket."""
        return cls(start, end, min(end - start + 1, max_width))


def enumerate_spans(n: int, max_width: int) -> list[SpanCandidate]:
    return [
        SpanCandidate(i, j, j - i + 1)
        for i in range(n)
        for j in range(i, min(n, i + max_width))
    ]


def spans_overlap(a, b) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


# --------------------------------------------------------------------------
# pooling


def masked_max(hidden: torch.Tensor, rows: torch.Tensor, lo: torch.Tensor, hi: torch.Tensor) -> torch.Tensor:
    """Max over ``hidden[rows[i], lo[i]:hi[i]+1]``; empty ranges give zeros."""
    pos = torch.arange(hidden.shape[1], device=hidden.device)
    inside = (pos[None, :] >= lo[:, None]) & (pos[None, :] <= hi[:, None])
    h = hidden[rows].masked_fill(~inside[:, :, None], float("-inf"))
    pooled = h.max(dim=1).values
    empty = ~inside.any(dim=1)
    return torch.where(empty[:, None], torch.zeros_like(pooled), pooled)


class SpERT(nn.Module):
    def __init__(self, encoder: ContextEncoder, schema: LabelSchema, max_width: int = 10,
                 width_dim: int = 25, dropout: float = 0.2):
        super().__init__()
        self.encoder = encoder
        self.schema = schema
        self.max_width = max_width
        self.dropout = dropout
        d = encoder.dim
        self.widths = nn.Embedding(max_width, width_dim)
        self.span_head = nn.Linear(2 * d + width_dim, len(schema.span_labels))
        self.rel_head = nn.Linear(3 * d + 2 * width_dim, len(schema.relation_labels))

    # -- pieces of the forward pass --------------------------------------

    def span_repr(self, hidden, rows, lo, hi, widths):
        pooled = masked_max(hidden, rows, lo, hi)
        return torch.cat([pooled, self.widths(widths - 1)], dim=-1)

    def span_logits(self, hidden, rows, span_repr, generator=None, mask=None):
        x = torch.cat([span_repr, hidden[rows, 0]], dim=-1)
        x = seeded_dropout(x, self.dropout, generator, self.training)
        logits = self.span_head(x)
        if mask is not None:
            logits = logits.masked_fill(~mask, float("-inf"))
        return logits

    def relation_logits(self, hidden, rows, head_repr, tail_repr, gap_lo, gap_hi, generator=None):
        ctx = masked_max(hidden, rows, gap_lo, gap_hi)
        x = torch.cat([head_repr, ctx, tail_repr], dim=-1)
        x = seeded_dropout(x, self.dropout, generator, self.training)
        return self.rel_head(x)

    def encode(self, seqs: Sequence[WordPieceSequence]) -> torch.Tensor:
        ids, mask = self.encoder.batch([s.piece_ids for s in seqs])
        return self.encoder(ids, mask)

    def forward(self, seqs, spans, pairs, generator=None):
        """Score a batch.

        ``spans[i]`` lists (start, end) token spans of sentence ``i``;
        ``pairs[i]`` lists (head, tail) indices into ``spans[i]``.
        Returns log-probabilities for all spans and all pairs, concatenated
        in sentence order.
        """
        hidden = self.encode(seqs)
        dev = hidden.device
        rows, lo, hi, width = [], [], [], []
        offsets = []
        for i, (seq, sp) in enumerate(zip(seqs, spans)):
            offsets.append(len(rows))
            for a, b in sp:
                p0, p1 = seq.piece_span(a, b)
                rows.append(i)
                lo.append(p0)
                hi.append(p1)
                width.append(min(b - a + 1, self.max_width))
        t = lambda v: torch.as_tensor(v, dtype=torch.long, device=dev)
        rows_t = t(rows)
        if rows:
            reprs = self.span_repr(hidden, rows_t, t(lo), t(hi), t(width))
            span_lp = F.log_softmax(self.span_logits(hidden, rows_t, reprs, generator), dim=-1)
        else:
            reprs = hidden.new_zeros((0, self.widths.embedding_dim + hidden.shape[-1]))
            span_lp = hidden.new_zeros((0, len(self.schema.span_labels)))

        h_idx, t_idx, prow, glo, ghi = [], [], [], [], []
        for i, (sp, pr) in enumerate(zip(spans, pairs)):
            for h, tl in pr:
                first, second = sorted((sp[h], sp[tl]))
                if spans_overlap(first, second):
                    raise ValueError(f"overlapping pair {sp[h]} {sp[tl]}")
                seq = seqs[i]
                h_idx.append(offsets[i] + h)
                t_idx.append(offsets[i] + tl)
                prow.append(i)
                glo.append(seq.piece_range_of_token[first[1]][1] + 1)
                ghi.append(seq.piece_range_of_token[second[0]][0] - 1)
        if h_idx:
            rel_logits = self.relation_logits(
                hidden, t(prow), reprs[t(h_idx)], reprs[t(t_idx)], t(glo), t(ghi), generator
            )
            rel_lp = F.log_softmax(rel_logits, dim=-1)
        else:
            rel_lp = hidden.new_zeros((0, len(self.schema.relation_labels)))
        return span_lp, rel_lp


# --------------------------------------------------------------------------
# single-sentence operations


def span_embedding(encoded: EncodedSentence, pieces: WordPieceSequence, span: SpanCandidate,
                   model: SpERT) -> torch.Tensor:
    p0, p1 = pieces.piece_span(span.start, span.end)
    pooled = encoded.piece_embeddings[p0:p1 + 1].max(dim=0).values
    return torch.cat([pooled, model.widths.weight[span.width_bucket - 1]])


def classify_spans(encoded: EncodedSentence, pieces: WordPieceSequence,
                   candidates: Sequence[SpanCandidate], model: SpERT) -> torch.Tensor:
    """Per-candidate label distributions, shape (len(candidates), |span labels|)."""
    if not candidates:
        return encoded.piece_embeddings.new_zeros((0, len(model.schema.span_labels)))
    reprs = torch.stack([span_embedding(encoded, pieces, c, model) for c in candidates])
    cls = encoded.cls_embedding.expand(len(candidates), -1)
    x = seeded_dropout(torch.cat([reprs, cls], dim=-1), model.dropout, None, model.training)
    return torch.softmax(model.span_head(x), dim=-1)


def relation_context(encoded: EncodedSentence, pieces: WordPieceSequence,
                     a: SpanCandidate, b: SpanCandidate) -> torch.Tensor:
    first, second = sorted([a, b])
    lo = pieces.piece_range_of_token[first.end][1] + 1
    hi = pieces.piece_range_of_token[second.start][0] - 1
    if hi < lo:
        return encoded.piece_embeddings.new_zeros(encoded.piece_embeddings.shape[-1])
    return encoded.piece_embeddings[lo:hi + 1].max(dim=0).values


def classify_relations(encoded: EncodedSentence, pieces: WordPieceSequence,
                       pairs: Sequence[tuple[SpanCandidate, SpanCandidate]], model: SpERT):
    """Distributions over relation labels for ordered (head, tail) pairs.

    Overlapping pairs are not scored; they are returned in ``skipped``.
    """
    kept, skipped, xs = [], [], []
    for head, tail in pairs:
        if spans_overlap((head.start, head.end), (tail.start, tail.end)):
            skipped.append((head, tail))
            continue
        kept.append((head, tail))
        xs.append(torch.cat([
            span_embedding(encoded, pieces, head, model),
            relation_context(encoded, pieces, head, tail),
            span_embedding(encoded, pieces, tail, model),
        ]))
    if not xs:
        return encoded.piece_embeddings.new_zeros((0, len(model.schema.relation_labels))), kept, skipped
    x = seeded_dropout(torch.stack(xs), model.dropout, None, model.training)
    return torch.softmax(model.rel_head(x), dim=-1), kept, skipped


# --------------------------------------------------------------------------
# training


@dataclass
class TrainingSample:
    spans: list[tuple[int, int]]
    span_labels: list[int]
    pairs: list[tuple[int, int]]
    pair_labels: list[int]


def sample_training_batch(inst: SentenceInstance, config: TrainConfig, rng: random.Random,
                          schema: LabelSchema) -> TrainingSample:
    """Gold spans plus sampled null spans; gold relations plus sampled unlinked pairs.

    Gold spans wider than ``max_span_width`` stay positives with the width
    bucket clamped, so every gold span is trained on.
    """
    spans: list[tuple[int, int]] = []
    labels: list[int] = []
    gold_index: list[int] = []
    where: dict[tuple[int, int], int] = {}
    for a, b, lab in inst.entities:
        if (a, b) not in where:
            where[(a, b)] = len(spans)
            spans.append((a, b))
            labels.append(lab)
        gold_index.append(where[(a, b)])

    pool = [(c.start, c.end) for c in enumerate_spans(inst.n_tokens, config.max_span_width)
            if (c.start, c.end) not in where]
    k = min(len(pool), config.negative_entity_count)
    for span in rng.sample(pool, k):
        spans.append(span)
        labels.append(schema.null_index)

    linked = {}
    for h, t, lab in inst.relations:
        key = (gold_index[h], gold_index[t])
        if key[0] != key[1] and not spans_overlap(spans[key[0]], spans[key[1]]):
            linked.setdefault(key, lab)
    pairs = list(linked)
    pair_labels = list(linked.values())
    n_gold = len(where)
    neg_pool = [
        (i, j) for i in range(n_gold) for j in range(n_gold)
        if i != j and (i, j) not in linked and not spans_overlap(spans[i], spans[j])
    ]
    k = min(len(neg_pool), config.negative_relation_count)
    negatives = rng.sample(neg_pool, k)
    room = max(0, config.max_span_pairs - len(pairs))
    for pair in negatives[:room]:
        pairs.append(pair)
        pair_labels.append(schema.null_index)
    del pairs[config.max_span_pairs:], pair_labels[config.max_span_pairs:]
    return TrainingSample(spans, labels, pairs, pair_labels)


def joint_loss(span_log_probs: torch.Tensor, span_gold, rel_log_probs: torch.Tensor, rel_gold) -> torch.Tensor:
    """Mean span cross-entropy plus mean relation cross-entropy (0 without relations).

    Inputs are log-distributions, one row per example.
    """
    span_gold = torch.as_tensor(span_gold, dtype=torch.long, device=span_log_probs.device)
    loss = F.nll_loss(span_log_probs, span_gold)
    if len(rel_gold):
        rel_gold = torch.as_tensor(rel_gold, dtype=torch.long, device=rel_log_probs.device)
        loss = loss + F.nll_loss(rel_log_probs, rel_gold)
    return loss


def batch_loss(model: SpERT, batch: Sequence[SentenceInstance], samples: Sequence[TrainingSample],
               generator=None) -> torch.Tensor:
    span_lp, rel_lp = model(
        [inst.seq for inst in batch],
        [s.spans for s in samples],
        [s.pairs for s in samples],
        generator,
    )
    span_gold = [lab for s in samples for lab in s.span_labels]
    rel_gold = [lab for s in samples for lab in s.pair_labels]
    return joint_loss(span_lp, span_gold, rel_lp, rel_gold)


def build_model(encoder: ContextEncoder, schema: LabelSchema, config: TrainConfig) -> SpERT:
    return SpERT(encoder, schema, config.max_span_width, config.width_dim, config.dropout)


def train(model: SpERT, train_docs: Sequence[Document], config: TrainConfig,
          dev_docs: Sequence[Document] | None = None) -> list[dict]:
    """Fit ``model`` in place and return one log row per epoch."""
    from .evaluation import evaluate

    instances = sentence_instances(train_docs, model.encoder)
    if not instances:
        raise ValueError("empty training corpus")
    rng = random.Random(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    optim = make_optimizer(model, config.learning_rate, config.weight_decay)
    total = config.epochs * n_batches(len(instances), config.batch_size)
    sched = warmup_linear(optim, total, config.warmup_fraction)
    history = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        losses = []
        for batch in batches(instances, config.batch_size, rng):
            samples = [sample_training_batch(inst, config, rng, model.schema) for inst in batch]
            loss = batch_loss(model, batch, samples, gen)
            check_finite(loss, f"epoch {epoch} step {step}")
            optim.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            optim.step()
            sched.step()
            step += 1
            losses.append(loss.item())
        row = {"epoch": epoch, "loss": sum(losses) / len(losses)}
        if dev_docs:
            report = evaluate(dev_docs, predict_documents(model, dev_docs, config), model.schema)
            row["dev_span_f1"] = report.span_micro_f1("exact")
            row["dev_relation_f1"] = report.relations["exact"]["subtype"].f1
        log.info("epoch %d %s", epoch, row)
        history.append(row)
    model.eval()
    return history


# --------------------------------------------------------------------------
# inference


@torch.no_grad()
def predict(model: SpERT, instances: Sequence[SentenceInstance], config: TrainConfig,
            chunk: int = 32) -> list[tuple[list, list]]:
    """Per sentence: spans as (start, end, label) and relations as (head, tail, label)."""
    was_training = model.training
    model.eval()
    null = model.schema.null_index
    out = []
    for k in range(0, len(instances), chunk):
        part = instances[k:k + chunk]
        cand = [[(c.start, c.end) for c in enumerate_spans(i.n_tokens, config.max_span_width)] for i in part]
        span_lp, _ = model([i.seq for i in part], cand, [[] for _ in part])
        labels = span_lp.argmax(dim=-1).tolist()
        kept_per = []
        pos = 0
        for spans in cand:
            lab = labels[pos:pos + len(spans)]
            pos += len(spans)
            kept_per.append(sorted((a, b, l) for (a, b), l in zip(spans, lab) if l != null))
        pairs_per = [candidate_pairs(kept, config.max_span_pairs) for kept in kept_per]
        _, rel_lp = model([i.seq for i in part], [[(a, b) for a, b, _ in kept] for kept in kept_per], pairs_per)
        rel_labels = rel_lp.argmax(dim=-1).tolist()
        pos = 0
        for kept, pairs in zip(kept_per, pairs_per):
            rels = [(h, t, l) for (h, t), l in zip(pairs, rel_labels[pos:pos + len(pairs)]) if l != null]
            pos += len(pairs)
            out.append((kept, rels))
    model.train(was_training)
    return out


def candidate_pairs(spans: Sequence[tuple[int, int, int]], cap: int) -> list[tuple[int, int]]:
    """Ordered non-overlapping pairs, lowest (head, tail) positions first, capped."""
    order = sorted(range(len(spans)), key=lambda i: spans[i])
    pairs = [
        (i, j) for i in order for j in order
        if i != j and not spans_overlap(spans[i][:2], spans[j][:2])
    ]
    return pairs[:cap]


def predict_documents(model: SpERT, docs: Sequence[Document], config: TrainConfig) -> list[Document]:
    instances = sentence_instances(docs, model.encoder)
    grouped = group_by_document(instances, predict(model, instances, config))
    return [assemble(doc, grouped.get(doc.id, [])) for doc in docs]
