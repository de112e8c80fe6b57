"""Answer metrics and run-level statistics."""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

from .chains import ReasoningChain
from .kg import graph_density
from .reader import Prediction, PredictionRecord
from .schema import QAItem

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, drop articles and punctuation, collapse whitespace (SQuAD convention)."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(pred: str, gold: str) -> int:
    return int(normalize_answer(pred) == normalize_answer(gold))


def f1(pred: str, gold: str) -> float:
    p, g = normalize_answer(pred).split(), normalize_answer(gold).split()
    if not p or not g:
        return float(p == g)
    overlap = sum((Counter(p) & Counter(g)).values())
    # harmonic mean of overlap/|p| and overlap/|g|, written with a single division
    return 2 * overlap / (len(p) + len(g))


def document_error_rate(titles: Sequence[str], supporting: set[str] | frozenset[str]) -> float:
    """Fraction of context documents outside the supporting set."""
    if not titles:
        raise ValueError("no documents to score")
    return sum(t not in supporting for t in titles) / len(titles)


def average_chain_length(chains: Sequence[ReasoningChain]) -> float:
    return sum(len(c) for c in chains) / len(chains) if chains else 0.0


@dataclass(frozen=True)
class EvalReport:
    n: int
    em: float
    f1: float
    avg_context_tokens: float
    avg_chain_length: float
    avg_relevant_docs: float
    doc_error_rate: float | None
    token_counter: str = "whitespace"

    def to_json(self) -> dict:
        return asdict(self)

    def format_table(self) -> str:
        rows = [
            ("questions", str(self.n)),
            ("EM", f"{100 * self.em:.2f}"),
            ("F1", f"{100 * self.f1:.2f}"),
            (f"avg context tokens ({self.token_counter})", f"{self.avg_context_tokens:.2f}"),
            ("avg chain length", f"{self.avg_chain_length:.2f}"),
            ("avg context documents", f"{self.avg_relevant_docs:.2f}"),
            ("doc error rate (%)", "n/a" if self.doc_error_rate is None else f"{100 * self.doc_error_rate:.2f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v.rjust(8)}" for k, v in rows)


def evaluate_run(
    predictions: Sequence[Prediction | PredictionRecord],
    items: Sequence[QAItem],
    chains: Mapping[str, Sequence[ReasoningChain]] | None = None,
) -> EvalReport:
    """Aggregate EM/F1 and context statistics over the predicted items.

    Every prediction must name a known item; items without a prediction are
    not scored.
    """
    records = [p if isinstance(p, PredictionRecord) else PredictionRecord.from_prediction(p) for p in predictions]
    by_id = {it.id: it for it in items}
    orphans = [r.id for r in records if r.id not in by_id]
    if orphans:
        raise ValueError(f"predictions without a matching item: {', '.join(orphans)}")
    n = len(records)
    if n == 0:
        return EvalReport(0, 0.0, 0.0, 0.0, 0.0, 0.0, None)
    ems = [exact_match(r.answer, by_id[r.id].gold_answer) for r in records]
    f1s = [f1(r.answer, by_id[r.id].gold_answer) for r in records]
    all_chains = [c for r in records for c in (chains or {}).get(r.id, ())]
    with_docs = [r for r in records if r.mode != "none"]
    errors = [
        document_error_rate(r.doc_titles, by_id[r.id].supporting_titles)
        for r in with_docs
        if r.doc_titles and by_id[r.id].supporting_titles
    ]
    counters = sorted({r.token_counter for r in records})
    return EvalReport(
        n=n,
        em=sum(ems) / n,
        f1=sum(f1s) / n,
        avg_context_tokens=sum(r.context_tokens for r in records) / n,
        avg_chain_length=average_chain_length(all_chains),
        avg_relevant_docs=sum(len(r.doc_titles) for r in with_docs) / len(with_docs) if with_docs else 0.0,
        doc_error_rate=sum(errors) / len(errors) if errors else None,
        token_counter="+".join(counters),
    )


def kg_statistics(graphs) -> dict[str, float]:
    """Average entity count, triple count and density over question graphs."""
    graphs = list(graphs)
    if not graphs:
        return {"avg_entities": 0.0, "avg_triples": 0.0, "avg_density": 0.0}
    k = len(graphs)
    return {
        "avg_entities": sum(g.num_entities for g in graphs) / k,
        "avg_triples": sum(g.num_triples for g in graphs) / k,
        "avg_density": sum(graph_density(g.num_triples, g.num_entities) for g in graphs) / k,
    }
