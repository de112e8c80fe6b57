"""Core record types shared across the pipeline."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Document:
    title: str
    text: str

    def __post_init__(self):
        if not self.title.strip():
            raise ValueError("document title must be non-empty")

    @property
    def key(self) -> str:
        """Content hash of title and text; distinct documents get distinct keys."""
        h = hashlib.sha256()
        h.update(self.title.encode("utf-8"))
        h.update(b"\x1f")
        h.update(self.text.encode("utf-8"))
        return h.hexdigest()

    def key_text(self) -> str:
        return f"Title: {self.title}\nText: {self.text}"


@dataclass(frozen=True)
class QAItem:
    id: str
    question: str
    gold_answer: str
    documents: tuple[Document, ...]
    supporting_titles: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "documents", tuple(self.documents))
        object.__setattr__(self, "supporting_titles", frozenset(self.supporting_titles))
        if not self.documents:
            raise ValueError(f"item {self.id}: at least one document is required")


@dataclass(frozen=True)
class KnowledgeTriple:
    head: str
    relation: str
    tail: str
    source_doc: int = -1
    source_title: str = ""

    def __post_init__(self):
        for name in ("head", "relation", "tail"):
            value = getattr(self, name).strip()
            if not value:
                raise ValueError(f"triple {name} must be non-empty")
            object.__setattr__(self, name, value)

    def render(self) -> str:
        return f"<{self.head}; {self.relation}; {self.tail}>"

    def with_source(self, index: int, title: str) -> "KnowledgeTriple":
        return KnowledgeTriple(self.head, self.relation, self.tail, index, title)

    def to_json(self) -> dict:
        return {
            "head": self.head,
            "relation": self.relation,
            "tail": self.tail,
            "source_doc": self.source_doc,
            "source_title": self.source_title,
        }

    @classmethod
    def from_json(cls, data: dict) -> "KnowledgeTriple":
        return cls(
            data["head"],
            data["relation"],
            data["tail"],
            int(data.get("source_doc", -1)),
            data.get("source_title", ""),
        )


def render_triples(triples, sep: str = ", ") -> str:
    return sep.join(t.render() for t in triples)
