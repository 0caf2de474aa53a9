"""Normalization-only modes: assign an anatomy subtype to gold anatomy phrases.

The same encoder and span classifier as the joint model are used, with the
output restricted to subtype labels (null and Finding logits set to -inf).
``phrase`` mode encodes the phrase alone; ``sentence`` mode encodes the
whole sentence and classifies the gold span inside it.
"""

from __future__ import annotations

import logging
import random
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Document
from .encoder import WordPieceSequence
from .evaluation import PRF, micro_average, prf
from .instances import (
    batches,
    check_finite,
    make_optimizer,
    n_batches,
    warmup_linear,
)
from .schema import LabelSchema
from .spert import SpERT, TrainConfig

log = logging.getLogger(__name__)

PHRASE = "phrase"
SENTENCE = "sentence"
MODES = (PHRASE, SENTENCE)


def normalizer_config(**overrides) -> TrainConfig:
    """Defaults for normalization training: dropout 0.05, batch 50, 15 epochs."""
    return TrainConfig(**{"dropout": 0.05, "batch_size": 50, "epochs": 15, **overrides})


@dataclass
class NormExample:
    doc_id: str
    sentence_index: int
    words: list[str]  # encoder input: the phrase, or the whole sentence
    span: tuple[int, int]  # gold anatomy span within ``words``
    label: int
    surface: str


def anatomy_examples(docs: Sequence[Document], schema: LabelSchema, mode: str) -> list[NormExample]:
    if mode not in MODES:
        raise ValueError(f"unknown normalization mode {mode!r}")
    out = []
    for doc in docs:
        for ent in doc.entities:
            if not schema.is_subtype(ent.label):
                continue
            words = doc.sentences[ent.sentence_index].token_texts(doc.text)
            phrase = words[ent.start:ent.end + 1]
            if mode == PHRASE:
                ex_words, span = phrase, (0, len(phrase) - 1)
            else:
                ex_words, span = words, (ent.start, ent.end)
            out.append(NormExample(doc.id, ent.sentence_index, ex_words, span, ent.label, doc.surface(ent)))
    return out


def subtype_mask(schema: LabelSchema) -> torch.Tensor:
    mask = torch.zeros(len(schema.span_labels), dtype=torch.bool)
    mask[list(schema.subtype_indices)] = True
    return mask


def subtype_logits(model: SpERT, seqs: Sequence[WordPieceSequence], spans: Sequence[tuple[int, int]],
                   generator=None) -> torch.Tensor:
    """Masked span-head logits, one row per (sequence, span)."""
    hidden = model.encode(seqs)
    dev = hidden.device
    lo, hi, width = [], [], []
    for seq, (a, b) in zip(seqs, spans):
        p0, p1 = seq.piece_span(a, b)
        lo.append(p0)
        hi.append(p1)
        width.append(min(b - a + 1, model.max_width))
    t = lambda v: torch.as_tensor(v, dtype=torch.long, device=dev)
    rows = torch.arange(len(seqs), device=dev)
    reprs = model.span_repr(hidden, rows, t(lo), t(hi), t(width))
    mask = subtype_mask(model.schema).to(dev).expand(len(seqs), -1)
    return model.span_logits(hidden, rows, reprs, generator, mask=mask)


def _encodable(model: SpERT, examples: Sequence[NormExample]):
    seqs, kept = [], []
    for ex in examples:
        seq = model.encoder.tokenize(ex.words)
        if ex.span[1] < seq.n_tokens:
            seqs.append(seq)
            kept.append(ex)
    return seqs, kept


def train(model: SpERT, docs: Sequence[Document], mode: str, config: TrainConfig) -> list[dict]:
    examples = anatomy_examples(docs, model.schema, mode)
    seqs, examples = _encodable(model, examples)
    if not examples:
        raise ValueError("no anatomy phrases to train on")
    items = list(zip(seqs, examples))
    rng = random.Random(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    optim = make_optimizer(model, config.learning_rate, config.weight_decay)
    total = config.epochs * n_batches(len(items), config.batch_size)
    sched = warmup_linear(optim, total, config.warmup_fraction)
    history = []
    model.train()
    for epoch in range(1, config.epochs + 1):
        losses = []
        for batch in batches(items, config.batch_size, rng):
            logits = subtype_logits(model, [s for s, _ in batch], [e.span for _, e in batch], gen)
            gold = torch.as_tensor([e.label for _, e in batch], dtype=torch.long)
            loss = F.cross_entropy(logits, gold)
            check_finite(loss, f"epoch {epoch}")
            optim.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            optim.step()
            sched.step()
            losses.append(loss.item())
        row = {"epoch": epoch, "loss": sum(losses) / len(losses)}
        log.info("epoch %d %s", epoch, row)
        history.append(row)
    model.eval()
    return history


@torch.no_grad()
def predict(model: SpERT, examples: Sequence[NormExample], chunk: int = 128) -> list[int]:
    """Predicted subtype index per example (ties go to the lowest index)."""
    was_training = model.training
    model.eval()
    out = []
    for k in range(0, len(examples), chunk):
        part = examples[k:k + chunk]
        seqs = [model.encoder.tokenize(ex.words) for ex in part]
        spans = [(min(a, s.n_tokens - 1), min(b, s.n_tokens - 1)) for s, (a, b) in
                 zip(seqs, (ex.span for ex in part))]
        out.extend(subtype_logits(model, seqs, spans).argmax(dim=-1).tolist())
    model.train(was_training)
    return out


def normalize_phrase(phrase: Sequence[str], model: SpERT) -> str:
    if not phrase:
        raise ValueError("empty phrase")
    ex = NormExample("", 0, list(phrase), (0, len(phrase) - 1), 0, " ".join(phrase))
    return model.schema.span_labels[predict(model, [ex])[0]]


def normalize_in_context(words: Sequence[str], span: tuple[int, int], model: SpERT) -> str:
    a, b = span
    if not 0 <= a <= b < len(words):
        raise ValueError(f"span {span} outside sentence of {len(words)} tokens")
    ex = NormExample("", 0, list(words), (a, b), 0, " ".join(words[a:b + 1]))
    return model.schema.span_labels[predict(model, [ex])[0]]


@dataclass
class NormReport:
    accuracy: float
    micro: PRF
    per_label: dict[str, PRF]
    confusion: list[tuple[tuple[str, str], int]]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "micro": self.micro.to_dict(),
            "per_label": {k: v.to_dict() for k, v in self.per_label.items()},
            "confusion": [[g, p, n] for (g, p), n in self.confusion],
        }


def score(examples: Sequence[NormExample], predicted: Sequence[int], schema: LabelSchema) -> NormReport:
    """Accuracy, per-subtype and micro PRF, and confusion pairs.

    Every phrase gets exactly one prediction, so micro-F1 equals accuracy.
    """
    tp, fp, fn = Counter(), Counter(), Counter()
    confusion = Counter()
    for ex, p in zip(examples, predicted):
        if p == ex.label:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[ex.label] += 1
            confusion[(schema.span_labels[ex.label], schema.span_labels[p])] += 1
    labels = sorted(set(tp) | set(fp) | set(fn))
    per_label = {schema.span_labels[i]: prf(tp[i], fp[i], fn[i]) for i in labels}
    micro = micro_average(per_label.values())
    accuracy = sum(tp.values()) / len(examples) if examples else 0.0
    if examples and abs(accuracy - micro.f1) > 1e-12:
        raise AssertionError(f"accuracy {accuracy} != micro-F1 {micro.f1}")
    return NormReport(accuracy, micro, per_label,
                      sorted(confusion.items(), key=lambda kv: (-kv[1], kv[0])))


def subset_accuracy(examples: Sequence[NormExample], predicted: Sequence[int], surfaces) -> float:
    """Accuracy over examples whose lowercased surface is in ``surfaces``."""
    keep = {s.lower() for s in surfaces}
    hits = [p == ex.label for ex, p in zip(examples, predicted) if ex.surface.lower() in keep]
    return sum(hits) / len(hits) if hits else float("nan")
