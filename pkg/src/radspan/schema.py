"""Span and relation label sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

NULL = "null"
FINDING = "Finding"
HAS = "has"


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSchema:
    """Ordered label sets shared by every model head.

    ``span_labels[0]`` is the null label and ``span_labels[1]`` is Finding;
    everything after that is an anatomy subtype.
    """

    span_labels: tuple[str, ...]
    relation_labels: tuple[str, ...] = (NULL, HAS)
    subtype_metadata: dict[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        labels = tuple(self.span_labels)
        object.__setattr__(self, "span_labels", labels)
        object.__setattr__(self, "relation_labels", tuple(self.relation_labels))
        if len(set(labels)) != len(labels):
            raise SchemaError("duplicate span labels")
        if labels[:2] != (NULL, FINDING):
            raise SchemaError("span labels must start with null, Finding")
        if self.relation_labels != (NULL, HAS):
            raise SchemaError("relation labels must be exactly [null, has]")
        for name in labels:
            if not name or any(c.isspace() for c in name):
                raise SchemaError(f"label {name!r} is not a single standoff type")
        object.__setattr__(self, "_index", {name: i for i, name in enumerate(labels)})

    @property
    def null_index(self) -> int:
        return 0

    @property
    def finding_index(self) -> int:
        return 1

    @property
    def subtypes(self) -> tuple[str, ...]:
        return self.span_labels[2:]

    @property
    def subtype_indices(self) -> range:
        return range(2, len(self.span_labels))

    @property
    def has_index(self) -> int:
        return 1

    def is_subtype(self, label: int) -> bool:
        return 2 <= label < len(self.span_labels)

    def span_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise SchemaError(f"unknown span label {name!r}") from None

    def relation_index(self, name: str) -> int:
        try:
            return self.relation_labels.index(name)
        except ValueError:
            raise SchemaError(f"unknown relation label {name!r}") from None

    def to_dict(self) -> dict:
        return {
            "span_labels": list(self.span_labels),
            "relation_labels": list(self.relation_labels),
            "concept_ids": dict(self.subtype_metadata),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LabelSchema":
        return cls(
            span_labels=data["span_labels"],
            relation_labels=data.get("relation_labels", [NULL, HAS]),
            subtype_metadata=dict(data.get("concept_ids", {})),
        )


def load_schema(path: str | Path | None = None) -> LabelSchema:
    """Read a schema file; with no path, the bundled 58-label schema."""
    if path is None:
        text = resources.files("radspan.data").joinpath("schema.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return LabelSchema.from_dict(json.loads(text))


def default_schema() -> LabelSchema:
    return load_schema(None)
