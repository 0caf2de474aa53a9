"""Documents, standoff ingestion, token alignment, splits and corpus counts."""

from __future__ import annotations

import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .schema import LabelSchema


class StandoffError(ValueError):
    """Raised for annotations that cannot be mapped onto the document."""


@dataclass(frozen=True)
class Sentence:
    char_start: int
    char_end: int
    tokens: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.tokens)

    def token_texts(self, text: str) -> list[str]:
        return [text[a:b] for a, b in self.tokens]


@dataclass(frozen=True, order=True)
class Entity:
    sentence_index: int
    start: int
    end: int  # inclusive
    label: int

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class Relation:
    head: int
    label: int
    tail: int


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    sentences: tuple[Sentence, ...]
    entities: tuple[Entity, ...] = ()
    relations: tuple[Relation, ...] = ()

    def surface(self, entity: Entity) -> str:
        sent = self.sentences[entity.sentence_index]
        return self.text[sent.tokens[entity.start][0]:sent.tokens[entity.end][1]]

    def char_span(self, entity: Entity) -> tuple[int, int]:
        sent = self.sentences[entity.sentence_index]
        return sent.tokens[entity.start][0], sent.tokens[entity.end][1]

    def sentence_entities(self, index: int) -> list[int]:
        return [i for i, e in enumerate(self.entities) if e.sentence_index == index]


# --------------------------------------------------------------------------
# segmentation

_BREAK_RE = re.compile(r"\n|(?<=[.:])[^\S\n]")
_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]|_")


def segment(text: str) -> tuple[Sentence, ...]:
    """Split on newlines and on ``.``/``:`` followed by whitespace.

    Tokens are maximal alphanumeric runs or single punctuation marks.
    Sentences without tokens are dropped.
    """
    sentences = []
    start = 0
    bounds = [m.start() for m in _BREAK_RE.finditer(text)] + [len(text)]
    for stop in bounds:
        toks = tuple(
            (m.start() + start, m.end() + start) for m in _TOKEN_RE.finditer(text[start:stop])
        )
        if toks:
            sentences.append(Sentence(toks[0][0], toks[-1][1], toks))
        start = stop + 1 if stop < len(text) else stop
    return tuple(sentences)


def align_entity(sentence: Sentence, char_span: tuple[int, int]) -> tuple[int, int]:
    """Smallest token range covering every token that overlaps ``char_span``."""
    a, b = char_span
    hit = [i for i, (s, e) in enumerate(sentence.tokens) if s < b and a < e]
    if not hit:
        raise StandoffError(f"character span {char_span} overlaps no token")
    return hit[0], hit[-1]


def _sentence_of(sentences: Sequence[Sentence], a: int, b: int) -> int:
    touching = [i for i, s in enumerate(sentences) if s.char_start < b and a < s.char_end]
    if not touching:
        raise StandoffError(f"span {a}-{b} lies outside every sentence")
    if len(touching) > 1:
        raise StandoffError(f"span {a}-{b} crosses a sentence boundary")
    return touching[0]


# --------------------------------------------------------------------------
# standoff

_ENT_RE = re.compile(r"^(T\d+)\t(\S+) (\d+) (\d+)\t(.*)$")
_REL_RE = re.compile(r"^(R\d+)\t(\S+) Arg1:(T\d+) Arg2:(T\d+)\s*$")


def parse_standoff(text: str, ann: str, schema: LabelSchema, doc_id: str = "") -> Document:
    sentences = segment(text)
    entities: list[Entity] = []
    ids: dict[str, int] = {}
    rel_lines = []
    for lineno, line in enumerate(ann.split("\n"), 1):
        if not line.strip():
            continue
        if line.startswith("T"):
            m = _ENT_RE.match(line)
            if not m:
                raise StandoffError(f"{doc_id}:{lineno}: malformed entity line {line!r}")
            tid, label, a, b, surface = m.groups()
            a, b = int(a), int(b)
            if not 0 <= a < b <= len(text):
                raise StandoffError(f"{doc_id}:{lineno}: offsets {a} {b} outside text")
            if text[a:b] != surface:
                raise StandoffError(f"{doc_id}:{lineno}: surface {surface!r} != text {text[a:b]!r}")
            idx = schema.span_index(label)
            if idx == schema.null_index:
                raise StandoffError(f"{doc_id}:{lineno}: null is not an entity label")
            si = _sentence_of(sentences, a, b)
            start, end = align_entity(sentences[si], (a, b))
            if tid in ids:
                raise StandoffError(f"{doc_id}:{lineno}: duplicate id {tid}")
            ids[tid] = len(entities)
            entities.append(Entity(si, start, end, idx))
        elif line.startswith("R"):
            m = _REL_RE.match(line)
            if not m:
                raise StandoffError(f"{doc_id}:{lineno}: malformed relation line {line!r}")
            rel_lines.append((lineno, m.groups()))
        else:
            raise StandoffError(f"{doc_id}:{lineno}: unsupported annotation {line!r}")

    relations = []
    for lineno, (_, label, arg1, arg2) in rel_lines:
        for arg in (arg1, arg2):
            if arg not in ids:
                raise StandoffError(f"{doc_id}:{lineno}: relation references missing {arg}")
        rel = Relation(ids[arg1], schema.relation_index(label), ids[arg2])
        _check_relation(rel, entities, schema, f"{doc_id}:{lineno}")
        relations.append(rel)
    return Document(doc_id, text, sentences, tuple(entities), tuple(relations))


def _check_relation(rel: Relation, entities: Sequence[Entity], schema: LabelSchema, where: str):
    if rel.label == schema.null_index:
        raise StandoffError(f"{where}: null relation label")
    if rel.head == rel.tail:
        raise StandoffError(f"{where}: relation head equals tail")
    if entities[rel.head].label != schema.finding_index:
        raise StandoffError(f"{where}: head must be Finding")
    if not schema.is_subtype(entities[rel.tail].label):
        raise StandoffError(f"{where}: tail must be an anatomy subtype")


def serialize_standoff(doc: Document, schema: LabelSchema) -> str:
    lines = []
    for i, ent in enumerate(doc.entities, 1):
        a, b = doc.char_span(ent)
        lines.append(f"T{i}\t{schema.span_labels[ent.label]} {a} {b}\t{doc.text[a:b]}")
    for i, rel in enumerate(doc.relations, 1):
        label = schema.relation_labels[rel.label]
        lines.append(f"R{i}\t{label} Arg1:T{rel.head + 1} Arg2:T{rel.tail + 1}")
    return "".join(line + "\n" for line in lines)


def validate(doc: Document, schema: LabelSchema) -> None:
    """Raise StandoffError if ``doc`` breaks any structural invariant."""
    prev = 0
    for s in doc.sentences:
        if s.char_start < prev or s.char_end > len(doc.text) or s.char_start > s.char_end:
            raise StandoffError(f"{doc.id}: sentence ranges out of order")
        last = s.char_start
        for a, b in s.tokens:
            if a < last or b <= a or b > s.char_end:
                raise StandoffError(f"{doc.id}: bad token ({a}, {b})")
            last = b
        prev = s.char_end
    for e in doc.entities:
        if not 0 <= e.sentence_index < len(doc.sentences):
            raise StandoffError(f"{doc.id}: entity outside sentences")
        if not 0 <= e.start <= e.end < len(doc.sentences[e.sentence_index]):
            raise StandoffError(f"{doc.id}: entity token range {e.span} invalid")
        if e.label == schema.null_index or e.label >= len(schema.span_labels):
            raise StandoffError(f"{doc.id}: bad entity label {e.label}")
    for r in doc.relations:
        if not (0 <= r.head < len(doc.entities) and 0 <= r.tail < len(doc.entities)):
            raise StandoffError(f"{doc.id}: relation references missing entity")
        _check_relation(r, doc.entities, schema, doc.id)


def read_corpus(directory: str | Path, schema: LabelSchema) -> list[Document]:
    """Load every ``<id>.txt``/``<id>.ann`` pair in ``directory``, sorted by id."""
    directory = Path(directory)
    docs = []
    for txt in sorted(directory.glob("*.txt")):
        ann = txt.with_suffix(".ann")
        ann_content = ann.read_text("utf-8") if ann.exists() else ""
        docs.append(parse_standoff(txt.read_text("utf-8"), ann_content, schema, txt.stem))
    return docs


def write_corpus(docs: Iterable[Document], directory: str | Path, schema: LabelSchema) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for doc in docs:
        with open(directory / f"{doc.id}.txt", "w", encoding="utf-8", newline="\n") as f:
            f.write(doc.text)
        with open(directory / f"{doc.id}.ann", "w", encoding="utf-8", newline="\n") as f:
            f.write(serialize_standoff(doc, schema))


# --------------------------------------------------------------------------
# splits and statistics


def split_corpus(docs: Sequence, ratios=(0.7, 0.1, 0.2), seed: int = 0):
    """Document-level shuffle split; dev/test sizes are rounded, train takes the rest."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    n = len(docs)
    nonzero = sum(1 for r in ratios if r > 0)
    if n < nonzero:
        raise ValueError(f"{n} documents cannot fill {nonzero} partitions")
    n_dev = math.floor(ratios[1] * n + 0.5)
    n_test = math.floor(ratios[2] * n + 0.5)
    # every requested partition gets at least one document
    if ratios[1] > 0:
        n_dev = max(n_dev, 1)
    if ratios[2] > 0:
        n_test = max(n_test, 1)
    n_train = n - n_dev - n_test
    if ratios[0] > 0 and n_train < 1:
        n_test -= 1 - n_train
        n_train = 1
    order = list(range(n))
    random.Random(seed).shuffle(order)
    train = [docs[i] for i in order[:n_train]]
    dev = [docs[i] for i in order[n_train:n_train + n_dev]]
    test = [docs[i] for i in order[n_train + n_dev:]]
    return train, dev, test


@dataclass
class CorpusStats:
    documents: int = 0
    sentences: int = 0
    tokens: int = 0
    entity_counts: dict[str, int] = field(default_factory=dict)
    relations: int = 0
    unique_spans: dict[str, int] = field(default_factory=dict)

    @property
    def entities(self) -> int:
        return sum(self.entity_counts.values())

    def anatomy_entities(self, schema: LabelSchema) -> int:
        return sum(self.entity_counts.get(s, 0) for s in schema.subtypes)

    def to_dict(self) -> dict:
        return {
            "documents": self.documents,
            "sentences": self.sentences,
            "tokens": self.tokens,
            "entities": self.entities,
            "relations": self.relations,
            "entity_counts": dict(self.entity_counts),
            "unique_spans": dict(self.unique_spans),
        }


def corpus_stats(docs: Iterable[Document], schema: LabelSchema) -> CorpusStats:
    stats = CorpusStats()
    counts: Counter = Counter()
    surfaces: dict[str, set[str]] = {}
    for doc in docs:
        stats.documents += 1
        stats.sentences += len(doc.sentences)
        stats.tokens += sum(len(s) for s in doc.sentences)
        stats.relations += len(doc.relations)
        for ent in doc.entities:
            name = schema.span_labels[ent.label]
            counts[name] += 1
            if schema.is_subtype(ent.label):
                surfaces.setdefault(name, set()).add(doc.surface(ent).lower())
    stats.entity_counts = {n: counts[n] for n in schema.span_labels[1:] if counts[n]}
    stats.unique_spans = {n: len(v) for n, v in surfaces.items()}
    return stats
