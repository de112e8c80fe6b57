"""Answer generation from reasoning chains or chain-voted documents."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Literal, Sequence

from .backends import Backend, GenerationRequest, whitespace_tokens
from .chains import ReasoningChain
from .schema import Document, KnowledgeTriple, render_triples
from .templates import fill_template, load_template

logger = logging.getLogger(__name__)

Mode = Literal["triple", "doc", "none", "all_docs", "top_t"]
MODES = ("triple", "doc", "none", "all_docs", "top_t")

ANSWER_MAX_TOKENS = 64
ANSWER_STOP = ("\n",)


def order_triples(chains: Sequence[ReasoningChain]) -> str:
    """Chains in rank order, one per line; triples comma-separated in selection order."""
    return "\n".join(render_triples(c.triples) for c in chains if c.triples)


def _resolve(t: KnowledgeTriple, documents: Sequence[Document]) -> int | None:
    if 0 <= t.source_doc < len(documents) and (not t.source_title or documents[t.source_doc].title == t.source_title):
        return t.source_doc
    if t.source_title:
        for i, d in enumerate(documents):
            if d.title == t.source_title:
                return i
    return None


def vote_documents(
    chains: Sequence[ReasoningChain],
    documents: Sequence[Document],
    *,
    weighted: bool = False,
    unique: bool = False,
) -> list[Document]:
    """Rank documents by the votes their triples receive across all chains.

    By default every triple occurrence is one vote. ``weighted`` makes a vote
    worth the chain's score; ``unique`` lets each distinct triple vote once.
    Ties keep the original document order; documents without votes are dropped.
    """
    votes: dict[int, float] = defaultdict(float)
    seen: set = set()
    dropped = 0
    for chain in chains:
        for t in chain.triples:
            i = _resolve(t, documents)
            if i is None:
                dropped += 1
                continue
            if unique:
                key = (i, t.head, t.relation, t.tail)
                if key in seen:
                    continue
                seen.add(key)
            votes[i] += chain.score if weighted else 1.0
    if dropped:
        logger.warning("%d triple votes dropped: source document not found", dropped)
    ranked = sorted((i for i, v in votes.items() if v > 0), key=lambda i: (-votes[i], i))
    return [documents[i] for i in ranked]


def render_documents(documents: Sequence[Document]) -> str:
    return "\n\n".join(f"Title: {d.title}\nText: {d.text}" for d in documents)


def count_tokens(text: str, backend: Backend | None = None) -> tuple[int, str]:
    """Token count and the name of the counter that produced it."""
    if backend is not None:
        n = backend.count_tokens(text)
        if n is not None:
            return n, f"{backend.name}-tokenizer"
    return whitespace_tokens(text), "whitespace"


@dataclass(frozen=True)
class ContextBundle:
    mode: str
    context_text: str
    sources: tuple = ()
    token_count: int = 0
    token_counter: str = "whitespace"
    doc_titles: tuple[str, ...] = ()


def build_context(
    mode: str,
    documents: Sequence[Document],
    chains: Sequence[ReasoningChain] = (),
    *,
    top_triples: Sequence[KnowledgeTriple] = (),
    backend: Backend | None = None,
    weighted_votes: bool = False,
    unique_votes: bool = False,
) -> ContextBundle:
    if mode not in MODES:
        raise ValueError(f"unknown reader mode {mode!r}")
    if mode == "none":
        return ContextBundle("none", "", (), 0, count_tokens("", backend)[1])
    if mode == "all_docs":
        text, sources = render_documents(documents), tuple(documents)
        titles = tuple(d.title for d in documents)
    elif mode == "top_t":
        pseudo = [ReasoningChain(tuple(top_triples), 1.0)]
        text, sources = render_triples(top_triples), tuple(top_triples)
        titles = tuple(d.title for d in vote_documents(pseudo, documents))
    else:
        voted = vote_documents(chains, documents, weighted=weighted_votes, unique=unique_votes)
        titles = tuple(d.title for d in voted)
        if mode == "triple":
            text, sources = order_triples(chains), tuple(chains)
        else:
            text, sources = render_documents(voted), tuple(voted)
    n, counter = count_tokens(text, backend)
    return ContextBundle(mode, text, sources, n, counter, titles)


def build_answer_prompt(question: str, bundle: ContextBundle) -> str:
    if not bundle.context_text:
        return fill_template(load_template("answer_prompt_no_context"), question=question)
    return fill_template(load_template("answer_prompt"), context=bundle.context_text, question=question)


@dataclass(frozen=True)
class Prediction:
    question_id: str
    answer: str
    bundle: ContextBundle
    chains: tuple[ReasoningChain, ...] = ()
    error: str | None = None

    def to_json(self) -> dict:
        out = {
            "id": self.question_id,
            "answer": self.answer,
            "mode": self.bundle.mode,
            "context_tokens": self.bundle.token_count,
            "token_counter": self.bundle.token_counter,
            "doc_titles": list(self.bundle.doc_titles),
        }
        if self.error is not None:
            out["error"] = self.error
        return out


def answer(question: str, bundle: ContextBundle, backend: Backend, *, question_id: str = "",
           chains: Sequence[ReasoningChain] = ()) -> Prediction:
    prompt = build_answer_prompt(question, bundle)
    text = backend.generate(GenerationRequest(prompt, max_tokens=ANSWER_MAX_TOKENS, stop_sequences=ANSWER_STOP,
                                              temperature=0.0))
    return Prediction(question_id, text.strip(), bundle, tuple(chains))


@dataclass
class PredictionRecord:
    """A prediction as read back from a predictions file."""

    id: str
    answer: str
    mode: str
    context_tokens: int = 0
    token_counter: str = "whitespace"
    doc_titles: list[str] = field(default_factory=list)
    error: str | None = None

    @classmethod
    def from_json(cls, data: dict) -> "PredictionRecord":
        return cls(data["id"], data.get("answer", ""), data.get("mode", ""), int(data.get("context_tokens", 0)),
                   data.get("token_counter", "whitespace"), list(data.get("doc_titles", [])), data.get("error"))

    @classmethod
    def from_prediction(cls, p: Prediction) -> "PredictionRecord":
        return cls.from_json(p.to_json())
