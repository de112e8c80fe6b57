"""Per-document triple generation and question-local graph assembly."""

from __future__ import annotations

import logging
import unicodedata
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

from .backends import Backend, GenerationRequest
from .schema import Document, KnowledgeTriple
from .templates import fill_template, load_template

logger = logging.getLogger(__name__)

OPENERS = "<\u27e8\u3008\u2329"
CLOSERS = ">\u27e9\u3009\u232a"

KG_MAX_TOKENS = 512
KG_STOP = ("\n\n",)


def _is_edge_noise(ch: str) -> bool:
    # quotes and terminal punctuation; brackets are kept so "X (novel)" stays balanced
    return ch.isspace() or unicodedata.category(ch) in ("Po", "Pi", "Pf")


def normalize_entity(text: str) -> str:
    """Lowercase, collapse whitespace, strip surrounding quotes and punctuation."""
    s = " ".join(text.lower().split())
    start, end = 0, len(s)
    while start < end and _is_edge_noise(s[start]):
        start += 1
    while end > start and _is_edge_noise(s[end - 1]):
        end -= 1
    return s[start:end]


def _squash(text: str) -> str:
    return " ".join(text.split()).casefold()


class ParseResult(NamedTuple):
    triples: list[KnowledgeTriple]
    skipped: int


def _scan_line(line: str) -> tuple[list[str], int]:
    """Split one line into bracketed fragments; count unterminated ones."""
    fragments, bad = [], 0
    i, n = 0, len(line)
    while i < n:
        if line[i] not in OPENERS:
            i += 1
            continue
        j = i + 1
        while j < n and line[j] not in CLOSERS and line[j] not in OPENERS:
            j += 1
        if j < n and line[j] in CLOSERS:
            fragments.append(line[i + 1 : j])
            i = j + 1
        else:
            bad += 1
            i = j
    return fragments, bad


def parse_triples(raw: str, title: str, source_doc: int = -1) -> ParseResult:
    """Parse ``<head; relation; tail>`` groups out of model output.

    Groups may sit one per line or several per line separated by commas.
    A generated head that matches ``title`` up to case and whitespace is
    replaced by ``title``; other heads are kept. Anything that looks like a
    triple but doesn't have exactly three non-empty parts is skipped and counted.
    """
    triples: list[KnowledgeTriple] = []
    skipped = 0
    for line in raw.splitlines():
        line = line.strip()
        if not line:
            continue
        if not any(ch in OPENERS for ch in line):
            if ";" in line:
                skipped += 1
            continue
        fragments, bad = _scan_line(line)
        skipped += bad
        for frag in fragments:
            parts = [p.strip() for p in frag.split(";")]
            if len(parts) != 3 or not all(parts):
                skipped += 1
                continue
            head, relation, tail = parts
            if _squash(head) == _squash(title):
                head = title
            triples.append(KnowledgeTriple(head, relation, tail, source_doc, title))
    return ParseResult(triples, skipped)


def render_kg_demo(title: str, text: str, triples: Iterable[KnowledgeTriple | Sequence[str]]) -> str:
    lines = [f"Title: {title}", f"Text: {text}", "Knowledge Triples:"]
    for t in triples:
        lines.append(t.render() if isinstance(t, KnowledgeTriple) else f"<{t[0]}; {t[1]}; {t[2]}>")
    return "\n".join(lines)


def build_kg_prompt(doc: Document, demos: Sequence[str], *, template: str | None = None, instruction: str | None = None) -> str:
    demo_block = "".join(d.rstrip("\n") + "\n\n" for d in demos)
    return fill_template(
        template if template is not None else load_template("kg_prompt"),
        instruction=instruction if instruction is not None else load_template("kg_instruction"),
        demonstrations=demo_block,
        title=doc.title,
        text=doc.text,
    )


def generate_document_kg(
    doc: Document,
    backend: Backend,
    demo_store=None,
    *,
    doc_index: int = -1,
    n_demos: int = 3,
    template: str | None = None,
) -> list[KnowledgeTriple]:
    """Prompt ``backend`` for the triples of one document."""
    demos = demo_store.select(doc.key_text(), n_demos) if demo_store is not None else []
    prompt = build_kg_prompt(doc, demos, template=template)
    raw = backend.generate(GenerationRequest(prompt, max_tokens=KG_MAX_TOKENS, stop_sequences=KG_STOP, temperature=0.0))
    result = parse_triples(raw, doc.title, doc_index)
    if result.skipped:
        logger.info("document %r: skipped %d malformed triple fragments", doc.title, result.skipped)
    return result.triples


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Question-local graph: the deduplicated triple list plus an entity index."""

    triples: tuple[KnowledgeTriple, ...]
    entity_index: dict[str, frozenset[int]]

    def __len__(self) -> int:
        return len(self.triples)

    @property
    def num_triples(self) -> int:
        return len(self.triples)

    @property
    def num_entities(self) -> int:
        return len(self.entity_index)

    @property
    def density(self) -> float:
        return graph_density(self.num_triples, self.num_entities)

    @property
    def stats(self) -> dict[str, float]:
        return {"num_entities": self.num_entities, "num_triples": self.num_triples, "density": self.density}

    def neighbours(self, entity: str) -> list[KnowledgeTriple]:
        return [self.triples[i] for i in sorted(self.entity_index.get(normalize_entity(entity), ()))]


def graph_density(num_triples: int, num_entities: int) -> float:
    if num_entities < 2:
        return 0.0
    return num_triples / (num_entities * (num_entities - 1))


def triple_key(t: KnowledgeTriple) -> tuple[str, str, str]:
    return normalize_entity(t.head), normalize_entity(t.relation), normalize_entity(t.tail)


def assemble_question_kg(per_doc_triples: Iterable[Iterable[KnowledgeTriple]]) -> KnowledgeGraph:
    """Union per-document triples, dropping normalized duplicates (first one wins).

    Entities from different documents are linked when their normalized strings
    are equal, e.g. a tail in one document and the title-head of another.
    """
    seen: set[tuple[str, str, str]] = set()
    triples: list[KnowledgeTriple] = []
    index: dict[str, set[int]] = {}
    for doc_triples in per_doc_triples:
        for t in doc_triples:
            key = triple_key(t)
            if key in seen:
                continue
            seen.add(key)
            i = len(triples)
            triples.append(t)
            index.setdefault(key[0], set()).add(i)
            index.setdefault(key[2], set()).add(i)
    return KnowledgeGraph(tuple(triples), {k: frozenset(v) for k, v in index.items()})

