"""Sentence-level training/inference instances and shared optimisation helpers."""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
from torch import nn

from .corpus import Document, Entity, Relation
from .encoder import ContextEncoder, WordPieceSequence


@dataclass
class SentenceInstance:
    doc_id: str
    sentence_index: int
    words: list[str]
    seq: WordPieceSequence
    # gold spans as (start, end, label); relations as (head, tail, label) into ``entities``
    entities: list[tuple[int, int, int]] = field(default_factory=list)
    relations: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        # may be fewer than len(words) after truncation
        return self.seq.n_tokens


def sentence_instances(docs: Iterable[Document], encoder: ContextEncoder) -> list[SentenceInstance]:
    out = []
    for doc in docs:
        local: dict[int, tuple[int, int]] = {}
        per_sentence: list[SentenceInstance] = []
        for si, sent in enumerate(doc.sentences):
            words = sent.token_texts(doc.text)
            per_sentence.append(SentenceInstance(doc.id, si, words, encoder.tokenize(words)))
        for ei, ent in enumerate(doc.entities):
            inst = per_sentence[ent.sentence_index]
            if ent.end >= inst.n_tokens:
                continue  # lost to truncation
            local[ei] = (ent.sentence_index, len(inst.entities))
            inst.entities.append((ent.start, ent.end, ent.label))
        for rel in doc.relations:
            if rel.head not in local or rel.tail not in local:
                continue
            (sh, h), (st, t) = local[rel.head], local[rel.tail]
            if sh == st:
                per_sentence[sh].relations.append((h, t, rel.label))
        out.extend(per_sentence)
    return out


def assemble(doc: Document, predictions: Sequence[tuple[list, list]]) -> Document:
    """Build a prediction Document from per-sentence (spans, pairs) output.

    ``predictions[i]`` holds spans as (start, end, label) and relations as
    (head, tail, label) indices into that sentence's span list.
    """
    entities: list[Entity] = []
    relations: list[Relation] = []
    for si, (spans, rels) in enumerate(predictions):
        base = len(entities)
        entities.extend(Entity(si, a, b, lab) for a, b, lab in spans)
        relations.extend(Relation(base + h, lab, base + t) for h, t, lab in rels)
    return Document(doc.id, doc.text, doc.sentences, tuple(entities), tuple(relations))


def group_by_document(instances: Sequence[SentenceInstance], outputs: Sequence) -> dict[str, list]:
    grouped: dict[str, list] = {}
    for inst, out in zip(instances, outputs):
        grouped.setdefault(inst.doc_id, []).append(out)
    return grouped


# --------------------------------------------------------------------------
# optimisation


def make_optimizer(model: nn.Module, lr: float, weight_decay: float):
    """AdamW with decoupled decay on every parameter except biases."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if name.endswith("bias") else decay).append(p)
    groups = [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=lr)


def warmup_linear(optimizer, total_steps: int, warmup_fraction: float):
    warmup = int(warmup_fraction * total_steps)

    def factor(step):
        if step < warmup:
            return (step + 1) / (warmup + 1)
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def batches(items: Sequence, size: int, rng) -> list[list]:
    order = list(range(len(items)))
    rng.shuffle(order)
    return [[items[i] for i in order[k:k + size]] for k in range(0, len(order), size)]


def n_batches(n: int, size: int) -> int:
    return math.ceil(n / size)


class TrainingDiverged(RuntimeError):
    pass


def check_finite(loss: torch.Tensor, where: str):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()} at {where}")


def seeded_dropout(x: torch.Tensor, p: float, generator: torch.Generator | None, training: bool):
    """Inverted dropout drawing its mask from an explicit generator."""
    if not training or p <= 0:
        return x
    keep = 1.0 - p
    mask = torch.empty_like(x).bernoulli_(keep, generator=generator)
    return x * mask / keep


@contextmanager
def seeded_init(seed: int):
    """Seed torch's default RNG for parameter initialisation only."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
