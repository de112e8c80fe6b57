"""Multiple-choice next-triple selection and the option-logit distribution."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .backends import Backend, GenerationRequest, OptionLogitRequest
from .schema import KnowledgeTriple, render_triples
from .templates import fill_template, load_template

logger = logging.getLogger(__name__)

LABELS = tuple("ABCDEFGHIJKLMNOPQRSTUVWXYZ") + tuple("123456789")
TERMINATE = -1  # option_map value of the stop option "A"
TERMINATE_TEXT = "no need for additional knowledge triples"
MAX_CANDIDATES = len(LABELS) - 1


def ordinal(n: int) -> str:
    if 10 <= n % 100 <= 20:
        suffix = "th"
    else:
        suffix = {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


def _as_text(t: KnowledgeTriple | Sequence[str]) -> str:
    return t.render() if isinstance(t, KnowledgeTriple) else f"<{t[0]}; {t[1]}; {t[2]}>"


def _option_lines(candidate_texts: Sequence[str]) -> list[str]:
    lines = [f"A. {TERMINATE_TEXT}"]
    lines += [f"{label}. {text}" for label, text in zip(LABELS[1:], candidate_texts)]
    return lines


def _rstrip_lines(text: str) -> str:
    return "\n".join(line.rstrip() for line in text.split("\n"))


def render_selector_demo(question: str, chain: Sequence, steps: Sequence[dict]) -> str:
    """Render a labelled reasoning path with its per-step choices."""
    parts = [f"coherent reasoning path: {', '.join(_as_text(t) for t in chain)}", f"question: {question}"]
    for i, step in enumerate(steps, 1):
        parts.append("")
        parts.append(f"The {ordinal(i)} triple in the reasoning path is selected as:")
        parts.append(f"existing knowledge triples: {', '.join(_as_text(t) for t in step.get('existing', []))}")
        parts.append(f"question: {question}")
        parts.append("candidate knowledge triples:")
        parts.extend(_option_lines([_as_text(t) for t in step["candidates"]]))
        parts.append(f"the next possible triple is: {step['choice']}")
    return _rstrip_lines("\n".join(parts))


@dataclass(frozen=True)
class ChoicePrompt:
    text: str
    option_map: dict[str, int]

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.option_map)


def build_selection_prompt(
    question: str,
    selected: Sequence[KnowledgeTriple],
    candidates: Sequence[tuple[int, KnowledgeTriple]],
    demos: Sequence[str] = (),
    *,
    is_single_token: Callable[[str], bool] | None = None,
    template: str | None = None,
) -> ChoicePrompt:
    """Lettered prompt with ``A`` = stop and candidates from ``B`` onward."""
    if not candidates:
        raise ValueError("at least one candidate triple is required")
    n = min(len(candidates), MAX_CANDIDATES)
    if is_single_token is not None:
        if not is_single_token(LABELS[0]):
            raise ValueError("the termination label 'A' is not a single token for this backend")
        valid = 0
        while valid < n and is_single_token(LABELS[valid + 1]):
            valid += 1
        n = valid
    if n < len(candidates):
        logger.warning("truncating %d candidates to %d single-token option labels", len(candidates), n)
    if n == 0:
        raise ValueError("no candidate label is a single token for this backend")
    candidates = candidates[:n]
    option_map = {LABELS[0]: TERMINATE}
    option_map.update({LABELS[i + 1]: idx for i, (idx, _) in enumerate(candidates)})
    demo_block = ""
    if demos:
        demo_block = load_template("selector_demo_intro") + "\n\n" + "\n\n".join(d.rstrip("\n") for d in demos) + "\n\n"
    text = fill_template(
        template if template is not None else load_template("selector_prompt"),
        instruction=load_template("selector_instruction"),
        demonstrations=demo_block,
        step=ordinal(len(selected) + 1),
        existing=render_triples(selected),
        question=question,
        options="\n".join(_option_lines([t.render() for _, t in candidates])),
    )
    return ChoicePrompt(_rstrip_lines(text), option_map)


def softmax(logits: Sequence[float]) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    z = np.exp(x - x.max())
    return z / z.sum()


@dataclass(frozen=True)
class TripleDistribution:
    probs: dict[str, float]

    def ranked(self) -> list[tuple[str, float]]:
        """Labels by probability, highest first; ties keep option order."""
        order = list(self.probs)
        return sorted(self.probs.items(), key=lambda kv: (-kv[1], order.index(kv[0])))

    def argmax(self) -> str:
        return self.ranked()[0][0]


def distribution_from_logits(logits: dict[str, float], labels: Sequence[str]) -> TripleDistribution:
    p = softmax([logits[lab] for lab in labels])
    return TripleDistribution(dict(zip(labels, p.tolist())))


def triple_distribution(prompt: ChoicePrompt, backend: Backend, *, degraded: bool | None = None) -> TripleDistribution:
    """Softmax over the option-token logits of every label, the stop option included.

    Without logit access (``degraded``) the emitted option token gets all the mass.
    """
    labels = prompt.labels
    if degraded is None:
        degraded = not backend.supports_logits
    if not degraded:
        logits = backend.option_logits(OptionLogitRequest(prompt.text, labels))
        return distribution_from_logits(logits, labels)
    out = backend.generate(GenerationRequest(prompt.text, max_tokens=2, temperature=0.0))
    choice = next((ch for ch in out.strip() if ch in prompt.option_map), None)
    if choice is None:
        logger.warning("selector output %r names no option; treating it as a stop", out)
        choice = LABELS[0]
    return TripleDistribution({lab: float(lab == choice) for lab in labels})


class TripleSelector:
    """Builds the choice prompt for a hypothesis and scores its options."""

    def __init__(self, backend: Backend, demo_store=None, *, n_demos: int = 3, degraded: bool | None = None,
                 template: str | None = None):
        self.backend = backend
        self.demo_store = demo_store
        self.n_demos = n_demos
        self.degraded = degraded
        self.template = template
        self._demo_cache: dict[str, list[str]] = {}
        self._lock = threading.Lock()

    def demos_for(self, question: str) -> list[str]:
        if self.demo_store is None or self.n_demos < 1:
            return []
        with self._lock:
            cached = self._demo_cache.get(question)
        if cached is None:
            cached = self.demo_store.select(question, self.n_demos)
            with self._lock:
                self._demo_cache[question] = cached
        return cached

    def prompt(self, question: str, selected: Sequence[KnowledgeTriple],
               candidates: Sequence[tuple[int, KnowledgeTriple]]) -> ChoicePrompt:
        return build_selection_prompt(
            question, selected, candidates, self.demos_for(question),
            is_single_token=self.backend.is_single_token, template=self.template,
        )

    def distribution(self, question: str, selected: Sequence[KnowledgeTriple],
                     candidates: Sequence[tuple[int, KnowledgeTriple]]) -> tuple[ChoicePrompt, TripleDistribution]:
        prompt = self.prompt(question, selected, candidates)
        return prompt, triple_distribution(prompt, self.backend, degraded=self.degraded)
