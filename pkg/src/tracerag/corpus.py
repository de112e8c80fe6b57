"""Dataset loaders, demonstration stores and the per-document triple cache."""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Literal

import numpy as np

from .backends import Backend, EmbeddingRequest
from .schema import Document, KnowledgeTriple, QAItem

logger = logging.getLogger(__name__)

DatasetFormat = Literal["hotpotqa", "twowiki", "musique"]
FORMATS = ("hotpotqa", "twowiki", "musique")


@dataclass
class LoadReport:
    loaded: int = 0
    skipped: int = 0
    reasons: list[str] = field(default_factory=list)

    def skip(self, where: str, reason: str) -> None:
        self.skipped += 1
        self.reasons.append(f"{where}: {reason}")
        logger.warning("skipping %s: %s", where, reason)


def _iter_records(path: Path) -> Iterator[dict]:
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if not stripped:
        return
    if stripped[0] == "[":
        yield from json.loads(text)
        return
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        obj = None
    if isinstance(obj, dict):
        yield from obj["data"] if "data" in obj else [obj]
        return
    for line in text.splitlines():
        if line.strip():
            yield json.loads(line)


def _context_item(rec: dict, where: str) -> QAItem:
    # HotPotQA and 2WikiMultiHopQA share the context/supporting_facts layout.
    docs = []
    for entry in rec.get("context", []):
        title, sentences = entry[0], entry[1]
        text = sentences if isinstance(sentences, str) else " ".join(s.strip() for s in sentences)
        docs.append(Document(title, text))
    support = {fact[0] for fact in rec.get("supporting_facts", [])}
    return QAItem(str(rec.get("_id", rec.get("id", where))), rec["question"], str(rec["answer"]), docs, support)


def _musique_item(rec: dict, where: str) -> QAItem:
    paras = rec.get("paragraphs", [])
    docs = [Document(p["title"], p["paragraph_text"]) for p in paras]
    support = {p["title"] for p in paras if p.get("is_supporting")}
    return QAItem(str(rec.get("id", where)), rec["question"], str(rec["answer"]), docs, support)


_ADAPTERS: dict[str, Callable[[dict, str], QAItem]] = {
    "hotpotqa": _context_item,
    "twowiki": _context_item,
    "musique": _musique_item,
}


def load_dataset(path: str | os.PathLike, format: str, report: LoadReport | None = None) -> list[QAItem]:
    """Load a multi-hop QA file, keeping documents in file order.

    Records missing a question or answer are skipped and counted in ``report``.
    Both JSON arrays and JSON-lines files are accepted.
    """
    if format not in _ADAPTERS:
        raise ValueError(f"unknown dataset format {format!r}; expected one of {', '.join(FORMATS)}")
    report = report if report is not None else LoadReport()
    adapter = _ADAPTERS[format]
    items = []
    for i, rec in enumerate(_iter_records(Path(path))):
        where = f"record {i}"
        missing = [k for k in ("question", "answer") if not rec.get(k) and rec.get(k) != 0]
        if missing:
            report.skip(where, f"missing {', '.join(missing)}")
            continue
        try:
            item = adapter(rec, where)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            report.skip(where, f"malformed record ({exc})")
            continue
        items.append(item)
    report.loaded = len(items)
    return items


class DemoStore:
    """Labelled demonstrations retrievable by embedding similarity.

    ``kind`` is ``kg_generation`` (keys are documents) or
    ``chain_construction`` (keys are questions).
    """

    def __init__(self, kind: str, keys: list[str], demos: list[str], backend: Backend | None = None,
                 key_vectors: np.ndarray | None = None):
        if kind not in ("kg_generation", "chain_construction"):
            raise ValueError(f"unknown demo store kind {kind!r}")
        if not keys or len(keys) != len(demos):
            raise ValueError("demo store needs a non-empty, aligned list of keys and demonstrations")
        self.kind = kind
        self.keys = keys
        self.demos = demos
        self.backend = backend
        self._key_vectors = key_vectors
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def key_vectors(self) -> np.ndarray:
        with self._lock:
            if self._key_vectors is None:
                if self.backend is None:
                    raise RuntimeError("demo store has no embedding backend")
                vecs = self.backend.embed(EmbeddingRequest(tuple(self.keys), role="passage"))
                self._key_vectors = np.asarray(vecs, dtype=np.float64)
            return self._key_vectors

    def select(self, key_text: str, n: int) -> list[str]:
        return select_demonstrations(key_text, self, n)

    @classmethod
    def from_file(cls, path: str | os.PathLike, backend: Backend | None = None) -> "DemoStore":
        from .kg import render_kg_demo
        from .selector import render_selector_demo

        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        kind = data["kind"]
        keys, demos = [], []
        for entry in data["entries"]:
            if "demo" in entry:
                keys.append(entry["key"])
                demos.append(entry["demo"])
            elif kind == "kg_generation":
                keys.append(Document(entry["title"], entry["text"]).key_text())
                demos.append(render_kg_demo(entry["title"], entry["text"], entry["triples"]))
            else:
                keys.append(entry["question"])
                demos.append(render_selector_demo(entry["question"], entry["chain"], entry.get("steps", [])))
        return cls(kind, keys, demos, backend)


def select_demonstrations(key_text: str, store: DemoStore, n: int) -> list[str]:
    """Top-``n`` demonstrations by inner product; ties go to the earlier entry."""
    if n < 1:
        raise ValueError("n must be ≥ 1")
    if store.backend is None:
        raise RuntimeError("demo store has no embedding backend")
    query = np.asarray(store.backend.embed(EmbeddingRequest((key_text,), role="query"))[0], dtype=np.float64)
    scores = store.key_vectors @ query
    order = sorted(range(len(store)), key=lambda i: (-scores[i], i))
    return [store.demos[i] for i in order[:n]]


class KGCacheError(RuntimeError):
    pass


CACHE_FORMAT = "tracerag-kg-cache"


class KGCache:
    """Append-only JSON-lines store of per-document triples keyed by content hash.

    Reads go through an in-memory index; writes are serialized. On reload the
    last record for a key wins, and a truncated trailing line is ignored.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._index: dict[str, list[KnowledgeTriple]] = {}
        self._write_lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        self._key_locks_guard = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    logger.warning("%s:%d: ignoring unreadable cache line", self.path, lineno)
                    continue
                if rec.get("type") == "header":
                    continue
                self._index[rec["doc_key"]] = [
                    KnowledgeTriple(h, r, t, -1, rec.get("title", "")) for h, r, t in rec["triples"]
                ]

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, doc: Document) -> bool:
        return doc.key in self._index

    def get(self, doc: Document) -> list[KnowledgeTriple] | None:
        hit = self._index.get(doc.key)
        return list(hit) if hit is not None else None

    def put(self, doc: Document, triples: Iterable[KnowledgeTriple]) -> None:
        stored = [KnowledgeTriple(t.head, t.relation, t.tail, -1, doc.title) for t in triples]
        record = {"doc_key": doc.key, "title": doc.title, "triples": [[t.head, t.relation, t.tail] for t in stored]}
        with self._write_lock:
            if self.path is not None:
                try:
                    fresh = not self.path.exists() or self.path.stat().st_size == 0
                    self.path.parent.mkdir(parents=True, exist_ok=True)
                    with self.path.open("a", encoding="utf-8") as fh:
                        if fresh:
                            fh.write(json.dumps({"type": "header", "format": CACHE_FORMAT}) + "\n")
                        fh.write(json.dumps(record, ensure_ascii=False) + "\n")
                except OSError as exc:
                    raise KGCacheError(f"cannot write KG cache {self.path}: {exc}") from exc
            self._index[doc.key] = stored

    def key_lock(self, doc: Document) -> threading.Lock:
        with self._key_locks_guard:
            return self._key_locks.setdefault(doc.key, threading.Lock())


def get_or_generate_kg(
    doc: Document,
    generator: Callable[[Document], list[KnowledgeTriple]],
    cache: KGCache,
    doc_index: int = -1,
) -> list[KnowledgeTriple]:
    """Cached triples for ``doc``; on a miss call ``generator`` once and store the result."""
    with cache.key_lock(doc):
        triples = cache.get(doc)
        if triples is None:
            triples = list(generator(doc))
            cache.put(doc, triples)
            triples = cache.get(doc)
    return [t.with_source(doc_index, doc.title) for t in triples]
