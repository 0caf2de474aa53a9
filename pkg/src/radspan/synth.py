"""Deterministic generator of radiology-style sentences with gold annotations.

Documents are assembled from section headers and templated sentences.
Templates carry slots for findings (``{F}``, ``{F2}``), anatomy (``{A}``,
``{A2}``), ambiguous anatomy (``{X}``) and its disambiguating context word
(``{D}``), plus the relation wiring between slots.  Ambiguous anatomy
surfaces always come in pairs within a document, one occurrence per
subtype, so any document-level split sees them 50/50.
"""

from __future__ import annotations

import json
import random
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .corpus import Document, parse_standoff, serialize_standoff, write_corpus
from .schema import LabelSchema

_SLOT_RE = re.compile(r"\{(F2?|A2?|X|D)\}")


class GrammarError(ValueError):
    pass


@dataclass
class Template:
    pattern: str
    relations: list[tuple[str, str]] = field(default_factory=list)
    weight: float = 1.0


def _default_findings():
    return [
        ("atelectasis", 3.0),
        ("nodule", 3.0),
        ("effusion", 2.5),
        ("fracture", 2.5),
        ("compressive atelectasis", 2.0),
        ("calcified plaque", 2.0),
        ("small nonobstructing calculus", 1.5),
        ("mildly displaced rib fracture", 1.0),
        ("ground glass opacity with surrounding consolidation", 1.0),
        ("heterogeneous enhancing mass with irregular margins and internal cystic change", 0.8),
        ("expanded thoracic aortic aneurysm measuring up to five centimeters in diameter", 0.5),
        ("ill defined heterogeneously enhancing soft tissue mass with central necrosis and calcification", 0.5),
    ]


def _default_anatomy():
    return [
        ("right lower lobe", "Lung", 2.0),
        ("lung bases", "Lung", 1.5),
        ("liver", "Liver", 1.0),
        ("caudate lobe", "Liver", 0.6),
        ("aorta", "Cardio", 1.5),
        ("coronary arteries", "Cardio", 1.2),
        ("arteries of the right lower extremity and the abdomen", "Cardio", 0.6),
        ("lumbar spine", "MSK", 1.5),
        ("femoral shaft", "MSK", 1.2),
        ("thoracic vertebral bodies", "MSK", 0.8),
        ("neck", "Neck", 0.6),
        ("endometrium", "Uterus", 0.4),
    ]


def _default_ambiguous():
    return {
        "cervical": {"Neck": ["paraspinal", "tonsillar"], "Uterus": ["endometrial", "adnexal"]},
        "right lobe": {"Lung": ["bronchial", "pleural"], "Liver": ["biliary", "portal"]},
    }


def _default_partial():
    return {
        "expanded thoracic aortic aneurysm measuring up to five centimeters in diameter":
            "expanded thoracic aortic aneurysm",
        "ill defined heterogeneously enhancing soft tissue mass with central necrosis and calcification":
            "soft tissue mass",
    }


def _default_templates():
    return [
        Template("{F} of the {A}.", [("F", "A")], 3.0),
        Template("{F} in the {A} and the {A2}.", [("F", "A"), ("F", "A2")], 1.5),
        Template("The {A} demonstrates {F}.", [("F", "A")], 2.0),
        Template("{F} and {F2} involving the {A}.", [("F", "A"), ("F2", "A")], 1.5),
        Template("There is no {F}.", [], 1.2),
        Template("No evidence of {F} or {F2}.", [], 0.8),
        Template("Redemonstrated {F} within the {A}, unchanged from prior.", [("F", "A")], 1.5),
        # ambiguous-anatomy template; drawn only through the paired mechanism
        Template("{F} noted in the {X} region adjacent to the {D} structures.", [("F", "X")], 0.0),
    ]


@dataclass
class GrammarConfig:
    findings: list[tuple[str, float]] = field(default_factory=_default_findings)
    anatomy: list[tuple[str, str, float]] = field(default_factory=_default_anatomy)
    ambiguous: dict[str, dict[str, list[str]]] = field(default_factory=_default_ambiguous)
    templates: list[Template] = field(default_factory=_default_templates)
    # long finding surface -> shorter core; with probability ``partial_rate``
    # an occurrence is annotated on the core only (inconsistent annotation)
    partial_annotation: dict[str, str] = field(default_factory=_default_partial)
    partial_rate: float = 0.5
    headers: list[str] = field(default_factory=lambda: ["FINDINGS:", "IMPRESSION:", "Chest:", "Abdomen and pelvis:"])
    sentences_per_doc: tuple[int, int] = (2, 4)
    ambiguous_doc_rate: float = 0.35
    seed: int = 0

    def validate(self, schema: LabelSchema) -> None:
        for _, sub, _ in self.anatomy:
            if not schema.is_subtype(schema.span_index(sub)):
                raise GrammarError(f"{sub} is not an anatomy subtype")
        for surface, senses in self.ambiguous.items():
            if len(senses) < 2:
                raise GrammarError(f"ambiguous surface {surface!r} needs at least two subtypes")
            seen: set[str] = set()
            for sub, words in senses.items():
                if not schema.is_subtype(schema.span_index(sub)):
                    raise GrammarError(f"{sub} is not an anatomy subtype")
                if not words or seen & set(words):
                    raise GrammarError(f"disambiguators for {surface!r} must be non-empty and disjoint")
                seen |= set(words)
        for t in self.templates:
            slots = set(_SLOT_RE.findall(t.pattern))
            for h, tl in t.relations:
                if h not in slots or tl not in slots:
                    raise GrammarError(f"template {t.pattern!r} wires a missing slot")
                if not h.startswith("F") or tl.startswith(("F", "D")):
                    raise GrammarError(f"template {t.pattern!r} must wire finding -> anatomy")
            if ("X" in slots) != ("D" in slots):
                raise GrammarError(f"template {t.pattern!r} needs both X and D")
            rest = _SLOT_RE.sub("", t.pattern)
            if "{" in rest or "}" in rest:
                raise GrammarError(f"template {t.pattern!r} has an unknown slot")
        if not any(t.weight > 0 for t in self.templates):
            raise GrammarError("no template has positive weight")
        if self.ambiguous and self.ambiguous_doc_rate > 0 and not self.ambiguous_templates():
            raise GrammarError("ambiguous surfaces need a template with an X slot")
        surfaces = {f for f, _ in self.findings}
        for long, core in self.partial_annotation.items():
            if long not in surfaces or core not in long:
                raise GrammarError(f"partial annotation {core!r} is not inside finding {long!r}")
        if not 0.0 <= self.partial_rate <= 1.0:
            raise GrammarError("partial_rate must lie in [0, 1]")
        lo, hi = self.sentences_per_doc
        if not 1 <= lo <= hi:
            raise GrammarError("sentences_per_doc must satisfy 1 <= lo <= hi")

    def ambiguous_templates(self) -> list[Template]:
        return [t for t in self.templates if "{X}" in t.pattern]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GrammarConfig":
        data = dict(data)
        if "templates" in data:
            data["templates"] = [
                Template(t["pattern"], [tuple(r) for r in t.get("relations", [])], t.get("weight", 1.0))
                for t in data["templates"]
            ]
        if "findings" in data:
            data["findings"] = [tuple(x) for x in data["findings"]]
        if "anatomy" in data:
            data["anatomy"] = [tuple(x) for x in data["anatomy"]]
        if "sentences_per_doc" in data:
            data["sentences_per_doc"] = tuple(data["sentences_per_doc"])
        return cls(**data)


@dataclass
class Bookkeeping:
    documents: int = 0
    content_sentences: int = 0
    entities: Counter = field(default_factory=Counter)
    relations: int = 0
    ambiguous: Counter = field(default_factory=Counter)  # "surface/subtype" -> count
    long_spans: int = 0  # gold spans longer than 10 tokens
    partial: int = 0  # long findings annotated on their core only

    def to_dict(self) -> dict:
        return {
            "documents": self.documents,
            "content_sentences": self.content_sentences,
            "entities": dict(sorted(self.entities.items())),
            "relations": self.relations,
            "ambiguous": dict(sorted(self.ambiguous.items())),
            "long_spans": self.long_spans,
            "partial": self.partial,
        }


class _Writer:
    """Accumulates text and standoff lines for one document."""

    def __init__(self):
        self.text = ""
        self.ents: list[str] = []
        self.rels: list[str] = []

    def add(self, s: str):
        self.text += s

    def entity(self, surface: str, label: str, core: str | None = None) -> str:
        """Append ``surface``; annotate it whole, or only its ``core`` substring."""
        tid = f"T{len(self.ents) + 1}"
        a = len(self.text)
        self.text += surface
        if core is not None:
            a += surface.lower().index(core)
            surface = self.text[a:a + len(core)]
        self.ents.append(f"{tid}\t{label} {a} {a + len(surface)}\t{surface}")
        return tid

    def relation(self, head: str, tail: str):
        self.rels.append(f"R{len(self.rels) + 1}\thas Arg1:{head} Arg2:{tail}")

    def ann(self) -> str:
        return "".join(line + "\n" for line in self.ents + self.rels)


def _pick(rng: random.Random, items, weights):
    return rng.choices(items, weights=weights, k=1)[0]


def _n_tokens(surface: str) -> int:
    return len(re.findall(r"[^\W_]+|[^\w\s]|_", surface))


class Generator:
    def __init__(self, config: GrammarConfig, schema: LabelSchema):
        config.validate(schema)
        self.config = config
        self.schema = schema
        self.book = Bookkeeping()

    def _sentence(self, w: _Writer, rng: random.Random, template: Template, fill: dict[str, tuple[str, str]]):
        ids: dict[str, str] = {}
        pos = 0
        first = True
        for m in _SLOT_RE.finditer(template.pattern):
            literal = template.pattern[pos:m.start()]
            if literal:
                w.add(literal)
                first = False
            slot = m.group(1)
            surface, label = fill[slot]
            if first:
                surface = surface[0].upper() + surface[1:]
                first = False
            if label is None:
                w.add(surface)
            else:
                core = self.config.partial_annotation.get(surface.lower())
                if core is not None and rng.random() < self.config.partial_rate:
                    self.book.partial += 1
                else:
                    core = None
                ids[slot] = w.entity(surface, label, core)
                self.book.entities[label] += 1
                if core is None and _n_tokens(surface) > 10:
                    self.book.long_spans += 1
            pos = m.end()
        w.add(template.pattern[pos:])
        for h, t in template.relations:
            w.relation(ids[h], ids[t])
            self.book.relations += 1
        self.book.content_sentences += 1

    def _fill(self, rng: random.Random) -> dict[str, tuple[str, str]]:
        c = self.config
        fsurf = [f for f, _ in c.findings]
        fw = [w for _, w in c.findings]
        anat = [(s, sub) for s, sub, _ in c.anatomy]
        aw = [w for _, _, w in c.anatomy]
        f1 = _pick(rng, fsurf, fw)
        f2 = _pick(rng, [f for f in fsurf if f != f1], [w for f, w in c.findings if f != f1])
        a1 = _pick(rng, anat, aw)
        rest = [(x, w) for x, w in zip(anat, aw) if x[0] != a1[0]]
        a2 = _pick(rng, [x for x, _ in rest], [w for _, w in rest])
        return {"F": (f1, "Finding"), "F2": (f2, "Finding"), "A": (a1[0], a1[1]), "A2": (a2[0], a2[1])}

    def document(self, index: int, rng: random.Random) -> tuple[str, str]:
        c = self.config
        w = _Writer()
        plain = [t for t in c.templates if t.weight > 0 and "{X}" not in t.pattern]
        weights = [t.weight for t in plain]
        n = rng.randint(*c.sentences_per_doc)
        bodies: list[tuple[Template, dict]] = [(_pick(rng, plain, weights), self._fill(rng)) for _ in range(n)]
        if c.ambiguous and rng.random() < c.ambiguous_doc_rate:
            surface = rng.choice(sorted(c.ambiguous))
            amb_t = rng.choice(c.ambiguous_templates())
            for sub in sorted(c.ambiguous[surface]):
                fill = self._fill(rng)
                fill["X"] = (surface, sub)
                fill["D"] = (rng.choice(c.ambiguous[surface][sub]), None)
                bodies.insert(rng.randint(0, len(bodies)), (amb_t, fill))
                self.book.ambiguous[f"{surface}/{sub}"] += 1
        # one or two sections, each led by a header line
        split = rng.randint(1, len(bodies)) if len(bodies) > 1 and rng.random() < 0.5 else len(bodies)
        sections = [bodies[:split], bodies[split:]] if split < len(bodies) else [bodies]
        headers = rng.sample(c.headers, len(sections))
        for k, (header, section) in enumerate(zip(headers, sections)):
            if k:
                w.add("\n")
            w.add(header)
            for template, fill in section:
                w.add(" ")
                self._sentence(w, rng, template, fill)
        w.add("\n")
        self.book.documents += 1
        return w.text, w.ann()

    def generate(self, n_documents: int) -> list[Document]:
        if n_documents < 0:
            raise ValueError("n_documents must be non-negative")
        rng = random.Random(self.config.seed)
        docs = []
        for i in range(n_documents):
            text, ann = self.document(i, rng)
            docs.append(parse_standoff(text, ann, self.schema, f"doc{i:04d}"))
        return docs


def generate(config: GrammarConfig, n_documents: int, schema: LabelSchema) -> tuple[list[Document], Bookkeeping]:
    gen = Generator(config, schema)
    docs = gen.generate(n_documents)
    return docs, gen.book


def write_generated(docs: list[Document], book: Bookkeeping, directory: str | Path,
                    schema: LabelSchema, header: dict | None = None) -> None:
    """Standoff pairs plus ``manifest.json`` with the generator's own counts."""
    write_corpus(docs, directory, schema)
    manifest = dict(header or {})
    manifest["bookkeeping"] = book.to_dict()
    manifest["documents"] = [d.id for d in docs]
    Path(directory, "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def ambiguous_occurrences(docs, config: GrammarConfig, schema: LabelSchema):
    """(doc, entity index) for every gold anatomy entity whose surface is ambiguous."""
    surfaces = {s.lower() for s in config.ambiguous}
    out = []
    for doc in docs:
        for i, e in enumerate(doc.entities):
            if schema.is_subtype(e.label) and doc.surface(e).lower() in surfaces:
                out.append((doc, i))
    return out


def disambiguated(doc: Document, entity_index: int, config: GrammarConfig, schema: LabelSchema) -> bool:
    """True when the entity's sentence contains a disambiguator of its own subtype only."""
    e = doc.entities[entity_index]
    surface = doc.surface(e).lower()
    words = {w.lower() for w in doc.sentences[e.sentence_index].token_texts(doc.text)}
    senses = {k.lower(): v for k, v in config.ambiguous.items()}[surface]
    own = schema.span_labels[e.label]
    hits = {sub for sub, cues in senses.items() if words & set(cues)}
    return hits == {own}


__all__ = [
    "GrammarConfig", "Template", "Generator", "Bookkeeping", "generate", "write_generated",
    "ambiguous_occurrences", "disambiguated", "serialize_standoff",
]
