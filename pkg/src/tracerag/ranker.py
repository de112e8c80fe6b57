"""Embedding-based candidate retrieval over the triples of one question."""

from __future__ import annotations

import threading
import weakref
from typing import Sequence

import numpy as np

from .backends import Backend, EmbeddingRequest
from .kg import KnowledgeGraph
from .schema import KnowledgeTriple

RankedCandidates = list[tuple[int, float]]


def format_query(question: str, selected: Sequence[KnowledgeTriple]) -> str:
    return " ".join([question, *(t.render() for t in selected)])


def top_k(scores: np.ndarray, k: int, exclude: set[int] = frozenset()) -> RankedCandidates:
    """Indices of the ``k`` highest scores; equal scores keep ascending index order."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    out = []
    for i in order:
        i = int(i)
        if i in exclude:
            continue
        out.append((i, float(scores[i])))
        if len(out) == k:
            break
    return out


class TripleRanker:
    """Scores triples against ``question + selected triples`` by raw inner product.

    Triple embeddings are computed once per graph and reused across steps and
    hypotheses.
    """

    def __init__(self, backend: Backend, *, exclude_selected: bool = True):
        self.backend = backend
        self.exclude_selected = exclude_selected
        self._matrices: weakref.WeakKeyDictionary[KnowledgeGraph, np.ndarray] = weakref.WeakKeyDictionary()
        self._locks: weakref.WeakKeyDictionary[KnowledgeGraph, threading.Lock] = weakref.WeakKeyDictionary()
        self._guard = threading.Lock()

    def triple_matrix(self, kg: KnowledgeGraph) -> np.ndarray:
        with self._guard:
            lock = self._locks.setdefault(kg, threading.Lock())
        with lock:
            m = self._matrices.get(kg)
            if m is None:
                texts = tuple(t.render() for t in kg.triples)
                m = np.asarray(self.backend.embed(EmbeddingRequest(texts, role="passage")), dtype=np.float64)
                self._matrices[kg] = m
            return m

    def scores(self, question: str, selected: Sequence[int], kg: KnowledgeGraph) -> np.ndarray:
        query = format_query(question, [kg.triples[i] for i in selected])
        q = np.asarray(self.backend.embed(EmbeddingRequest((query,), role="query"))[0], dtype=np.float64)
        return self.triple_matrix(kg) @ q

    def rank_candidates(self, question: str, selected: Sequence[int], kg: KnowledgeGraph, K: int) -> RankedCandidates:
        if K < 1:
            raise ValueError("K must be ≥ 1")
        if len(kg) == 0:
            return []
        exclude = set(selected) if self.exclude_selected else set()
        if len(exclude) >= len(kg):
            return []
        return top_k(self.scores(question, selected, kg), K, exclude)
