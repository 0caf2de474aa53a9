"""Multi-step baseline: BIO tagging, then relation classification on rewritten input.

Entities come from a per-piece BIO tagger; each candidate (Finding, anatomy)
pair is then re-encoded with both mentions replaced by marker pieces and
classified from the [CLS] vector.  Both heads share one encoder.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Document
from .encoder import ContextEncoder, Vocab, WordPieceSequence
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
from .spert import TrainConfig, spans_overlap

log = logging.getLogger(__name__)

OUTSIDE = 0


def baseline_config(**overrides) -> TrainConfig:
    """Defaults for the multi-step model (batch size 50)."""
    return TrainConfig(**{"batch_size": 50, **overrides})


# --------------------------------------------------------------------------
# BIO tags


def tag_count(schema: LabelSchema) -> int:
    return 1 + 2 * (len(schema.span_labels) - 1)


def begin_tag(label: int) -> int:
    return 2 * label - 1


def inside_tag(label: int) -> int:
    return 2 * label


def tag_label(tag: int) -> tuple[str, int]:
    if tag == OUTSIDE:
        return "O", 0
    return ("B" if tag % 2 else "I"), (tag + 1) // 2


def tag_name(tag: int, schema: LabelSchema) -> str:
    kind, label = tag_label(tag)
    return "O" if kind == "O" else f"{kind}-{schema.span_labels[label]}"


def resolve_overlaps(entities: Sequence[tuple[int, int, int]]) -> list[tuple[int, int, int]]:
    """Drop overlapping spans: longer span wins, then the earlier start."""
    kept: list[tuple[int, int, int]] = []
    for e in sorted(entities, key=lambda e: (-(e[1] - e[0]), e[0], e[1], e[2])):
        if not any(spans_overlap(e, k) for k in kept):
            kept.append(e)
    return sorted(kept)


def bio_encode(seq: WordPieceSequence, entities: Sequence[tuple[int, int, int]]) -> list[int]:
    """One tag per piece after [CLS]."""
    tags = [OUTSIDE] * (len(seq) - 1)
    for a, b, label in resolve_overlaps(entities):
        p0, p1 = seq.piece_span(a, b)
        tags[p0 - 1] = begin_tag(label)
        for p in range(p0 + 1, p1 + 1):
            tags[p - 1] = inside_tag(label)
    return tags


def bio_decode(tags: Sequence[int], seq: WordPieceSequence) -> list[tuple[int, int, int]]:
    """Token tag = tag of its first piece; an I- tag without a matching open span starts one."""
    entities = []
    open_span = None
    for tok, (p0, _) in enumerate(seq.piece_range_of_token):
        kind, label = tag_label(tags[p0 - 1])
        if kind == "I" and open_span is not None and open_span[2] == label:
            open_span[1] = tok
            continue
        if open_span is not None:
            entities.append(tuple(open_span))
            open_span = None
        if kind != "O":
            open_span = [tok, tok, label]
    if open_span is not None:
        entities.append(tuple(open_span))
    return entities


# --------------------------------------------------------------------------
# relation instances


@dataclass
class RelationInstance:
    piece_ids: list[int]
    head: tuple[int, int, int]
    tail: tuple[int, int, int]
    label: int = 0


def make_relation_instance(seq: WordPieceSequence, head, tail, vocab: Vocab, schema: LabelSchema,
                           label: int = 0) -> RelationInstance | None:
    """Replace head and tail mentions by ``@<label>`` ``$`` marker pairs.

    Returns None for overlapping mentions.
    """
    if head[2] != schema.finding_index or not schema.is_subtype(tail[2]):
        raise ValueError("head must be Finding and tail an anatomy subtype")
    if spans_overlap(head, tail):
        return None
    ids = list(seq.piece_ids)
    for a, b, lab in sorted([head, tail], key=lambda e: e[0], reverse=True):
        p0, p1 = seq.piece_span(a, b)
        ids[p0:p1 + 1] = [vocab.marker_id(schema.span_labels[lab]), vocab.close_id]
    return RelationInstance(ids, tuple(head), tuple(tail), label)


def render(piece_ids: Sequence[int], vocab: Vocab) -> str:
    """Readable text of a piece sequence (without [CLS])."""
    out = ""
    for pid in piece_ids:
        piece = vocab.pieces[pid]
        if piece == "[CLS]":
            continue
        if piece.startswith("##") or piece == "$":
            out += piece.removeprefix("##")
        else:
            out += (" " if out else "") + piece
    return out


# --------------------------------------------------------------------------
# model


class BertMulti(nn.Module):
    def __init__(self, encoder: ContextEncoder, schema: LabelSchema, dropout: float = 0.2):
        super().__init__()
        self.encoder = encoder
        self.schema = schema
        self.dropout = dropout
        self.tagger = nn.Linear(encoder.dim, tag_count(schema))
        self.rel_head = nn.Linear(encoder.dim, len(schema.relation_labels))

    def tag_log_probs(self, seqs: Sequence[WordPieceSequence], generator=None):
        ids, mask = self.encoder.batch([s.piece_ids for s in seqs])
        hidden = self.encoder(ids, mask)[:, 1:]
        x = seeded_dropout(hidden, self.dropout, generator, self.training)
        return F.log_softmax(self.tagger(x), dim=-1), mask[:, 1:]

    def relation_log_probs(self, instances: Sequence[RelationInstance], generator=None):
        ids, mask = self.encoder.batch([r.piece_ids for r in instances])
        cls = self.encoder(ids, mask)[:, 0]
        x = seeded_dropout(cls, self.dropout, generator, self.training)
        return F.log_softmax(self.rel_head(x), dim=-1)


def relation_candidates(entities: Sequence[tuple[int, int, int]], schema: LabelSchema, cap: int):
    """Finding x anatomy pairs (index pairs), lowest positions first, capped."""
    order = sorted(range(len(entities)), key=lambda i: entities[i])
    heads = [i for i in order if entities[i][2] == schema.finding_index]
    tails = [i for i in order if schema.is_subtype(entities[i][2])]
    pairs = [(h, t) for h in heads for t in tails if not spans_overlap(entities[h], entities[t])]
    return pairs[:cap]


def training_relations(inst: SentenceInstance, model: BertMulti, config: TrainConfig,
                       rng: random.Random) -> list[RelationInstance]:
    gold = {(h, t): lab for h, t, lab in inst.relations}
    pairs = relation_candidates(inst.entities, model.schema, len(inst.entities) ** 2)
    pos = [p for p in pairs if p in gold]
    neg = [p for p in pairs if p not in gold]
    neg = rng.sample(neg, min(len(neg), config.negative_relation_count))
    chosen = (pos + neg)[:config.max_span_pairs]
    vocab = model.encoder.vocab
    out = []
    for h, t in chosen:
        ri = make_relation_instance(inst.seq, inst.entities[h], inst.entities[t], vocab, model.schema,
                                    gold.get((h, t), 0))
        if ri is not None:
            out.append(ri)
    return out


def batch_loss(model: BertMulti, batch: Sequence[SentenceInstance],
               rel_instances: Sequence[RelationInstance], generator=None) -> torch.Tensor:
    """Mean tagging cross-entropy plus mean relation cross-entropy."""
    lp, mask = model.tag_log_probs([i.seq for i in batch], generator)
    gold = torch.zeros(mask.shape, dtype=torch.long, device=lp.device)
    for k, inst in enumerate(batch):
        tags = bio_encode(inst.seq, inst.entities)
        gold[k, :len(tags)] = torch.as_tensor(tags, dtype=torch.long)
    loss = F.nll_loss(lp[mask], gold[mask])
    if rel_instances:
        rlp = model.relation_log_probs(rel_instances, generator)
        labels = torch.as_tensor([r.label for r in rel_instances], dtype=torch.long, device=rlp.device)
        loss = loss + F.nll_loss(rlp, labels)
    return loss


def train(model: BertMulti, train_docs: Sequence[Document], config: TrainConfig,
          dev_docs: Sequence[Document] | None = None) -> list[dict]:
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
    for epoch in range(1, config.epochs + 1):
        model.train()
        losses = []
        for batch in batches(instances, config.batch_size, rng):
            rels = [r for inst in batch for r in training_relations(inst, model, config, rng)]
            loss = batch_loss(model, batch, rels, gen)
            check_finite(loss, f"epoch {epoch}")
            optim.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            optim.step()
            sched.step()
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


@torch.no_grad()
def predict_multi(model: BertMulti, instances: Sequence[SentenceInstance], config: TrainConfig,
                  chunk: int = 64) -> list[tuple[list, list]]:
    was_training = model.training
    model.eval()
    out = []
    for k in range(0, len(instances), chunk):
        part = instances[k:k + chunk]
        lp, _ = model.tag_log_probs([i.seq for i in part])
        tags = lp.argmax(dim=-1).tolist()
        ents_per = [sorted(bio_decode(t, inst.seq)) for t, inst in zip(tags, part)]
        rel_inst, owners = [], []
        for si, (inst, ents) in enumerate(zip(part, ents_per)):
            for h, t in relation_candidates(ents, model.schema, config.max_span_pairs):
                ri = make_relation_instance(inst.seq, ents[h], ents[t], model.encoder.vocab, model.schema)
                rel_inst.append(ri)
                owners.append((si, h, t))
        rels_per = [[] for _ in part]
        if rel_inst:
            labels = model.relation_log_probs(rel_inst).argmax(dim=-1).tolist()
            for (si, h, t), lab in zip(owners, labels):
                if lab != model.schema.null_index:
                    rels_per[si].append((h, t, lab))
        out.extend(zip(ents_per, rels_per))
    model.train(was_training)
    return out


def predict_documents(model: BertMulti, docs: Sequence[Document], config: TrainConfig) -> list[Document]:
    instances = sentence_instances(docs, model.encoder)
    grouped = group_by_document(instances, predict_multi(model, instances, config))
    return [assemble(doc, grouped.get(doc.id, [])) for doc in docs]
