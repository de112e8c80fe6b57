"""Beam search over the selector's next-triple distributions.

Each hypothesis is an ordered list of triple indices plus a cumulative
log-probability. At every step each live hypothesis asks the ranker for its
top-K candidates, asks the selector for a distribution over the options, and
branches on its top-b triple options and on the stop option. The pooled
hypotheses, finished ones included, are cut back to the best R.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

from .kg import KnowledgeGraph
from .ranker import RankedCandidates
from .schema import KnowledgeTriple
from .selector import TERMINATE, ChoicePrompt, TripleDistribution

logger = logging.getLogger(__name__)


class Ranker(Protocol):
    def rank_candidates(self, question: str, selected: Sequence[int], kg: KnowledgeGraph, K: int) -> RankedCandidates: ...


class Selector(Protocol):
    def distribution(self, question: str, selected: Sequence[KnowledgeTriple],
                     candidates: Sequence[tuple[int, KnowledgeTriple]]) -> tuple[ChoicePrompt, TripleDistribution]: ...


@dataclass(frozen=True)
class ChainConfig:
    L: int = 4
    R: int = 5
    b: int = 5
    K: int = 20
    fixed_length: bool = False

    def __post_init__(self):
        for name in ("L", "R", "b", "K"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be ≥ 1")


@dataclass(frozen=True)
class BeamHypothesis:
    indices: tuple[int, ...] = ()
    labels: tuple[str, ...] = ()
    log_probs: tuple[float, ...] = ()
    log_score: float = 0.0
    terminated: bool = False
    ended_at: int | None = None
    exhausted: bool = False

    def extend(self, index: int, label: str, logp: float) -> "BeamHypothesis":
        return replace(self, indices=self.indices + (index,), labels=self.labels + (label,),
                       log_probs=self.log_probs + (logp,), log_score=self.log_score + logp)

    def stop(self, label: str, logp: float, step: int) -> "BeamHypothesis":
        return replace(self, labels=self.labels + (label,), log_probs=self.log_probs + (logp,),
                       log_score=self.log_score + logp, terminated=True, ended_at=step)


def _order_key(h: BeamHypothesis) -> tuple:
    return (-h.log_score, h.ended_at if h.ended_at is not None else math.inf, h.indices)


@dataclass(frozen=True)
class ReasoningChain:
    triples: tuple[KnowledgeTriple, ...]
    score: float
    indices: tuple[int, ...] = ()
    labels: tuple[str, ...] = ()
    step_probs: tuple[float, ...] = ()
    terminated: bool = False
    question_id: str = ""

    def __len__(self) -> int:
        return len(self.triples)

    def to_json(self) -> dict:
        return {
            "triples": [t.to_json() for t in self.triples],
            "indices": list(self.indices),
            "score": self.score,
            "labels": list(self.labels),
            "step_probs": list(self.step_probs),
            "terminated": self.terminated,
        }

    @classmethod
    def from_json(cls, data: dict, question_id: str = "") -> "ReasoningChain":
        return cls(
            tuple(KnowledgeTriple.from_json(t) for t in data["triples"]),
            float(data["score"]),
            tuple(data.get("indices", ())),
            tuple(data.get("labels", ())),
            tuple(data.get("step_probs", ())),
            bool(data.get("terminated", False)),
            question_id,
        )


@dataclass
class SearchStats:
    selector_calls: int = 0
    ranker_calls: int = 0
    steps: int = 0
    frontier_sizes: list[int] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, name: str) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)


def _expansions(dist: TripleDistribution, option_map: dict[str, int], cfg: ChainConfig) -> list[tuple[str, float]]:
    probs = dist.probs
    triple_opts = [(lab, p) for lab, p in probs.items() if option_map[lab] != TERMINATE]
    stop_opts = [(lab, p) for lab, p in probs.items() if option_map[lab] == TERMINATE]
    if cfg.fixed_length:
        mass = sum(p for _, p in triple_opts)
        if mass <= 0:
            return []
        triple_opts = [(lab, p / mass) for lab, p in triple_opts]
        stop_opts = []
    order = list(probs)
    triple_opts.sort(key=lambda kv: (-kv[1], order.index(kv[0])))
    chosen = [(lab, p) for lab, p in triple_opts[: cfg.b] if p > 0]
    chosen += [(lab, p) for lab, p in stop_opts if p > 0]
    return chosen


def _prune(pool: list[BeamHypothesis], R: int) -> list[BeamHypothesis]:
    best: dict[tuple[int, ...], BeamHypothesis] = {}
    for h in pool:
        prev = best.get(h.indices)
        if prev is None or _order_key(h) < _order_key(prev):
            best[h.indices] = h
    return sorted(best.values(), key=_order_key)[:R]


def _to_chain(h: BeamHypothesis, kg: KnowledgeGraph, question_id: str) -> ReasoningChain:
    return ReasoningChain(
        tuple(kg.triples[i] for i in h.indices), math.exp(h.log_score), h.indices, h.labels,
        tuple(math.exp(lp) for lp in h.log_probs), h.terminated, question_id,
    )


def beam_search(question: str, kg: KnowledgeGraph, cfg: ChainConfig, ranker: Ranker, selector: Selector,
                stats: SearchStats | None = None, executor=None) -> list[BeamHypothesis]:
    """Run the search and return the surviving hypotheses, best first."""
    stats = stats if stats is not None else SearchStats()
    beam = [BeamHypothesis()]

    def expand(h: BeamHypothesis, step: int) -> list[BeamHypothesis]:
        if h.terminated:
            return [h]
        stats.bump("ranker_calls")
        cands = ranker.rank_candidates(question, h.indices, kg, cfg.K)
        if not cands:
            return [replace(h, terminated=True, ended_at=step, exhausted=True)]
        stats.bump("selector_calls")
        prompt, dist = selector.distribution(
            question, [kg.triples[i] for i in h.indices], [(i, kg.triples[i]) for i, _ in cands]
        )
        children = []
        for label, p in _expansions(dist, prompt.option_map, cfg):
            target = prompt.option_map[label]
            if target == TERMINATE:
                children.append(h.stop(label, math.log(p), step))
            else:
                children.append(h.extend(target, label, math.log(p)))
        if not children:
            children.append(replace(h, terminated=True, ended_at=step, exhausted=True))
        return children

    for step in range(1, cfg.L + 1):
        live = sum(not h.terminated for h in beam)
        stats.frontier_sizes.append(live)
        stats.steps = step
        mapper = executor.map if executor is not None else map
        pool = [child for children in mapper(lambda h: expand(h, step), beam) for child in children]
        beam = _prune(pool, cfg.R)
        if all(h.terminated for h in beam):
            break
    return beam


def construct_chains(question: str, kg: KnowledgeGraph, cfg: ChainConfig, ranker: Ranker, selector: Selector,
                     *, question_id: str = "", stats: SearchStats | None = None, executor=None) -> list[ReasoningChain]:
    """Up to R reasoning chains for ``question``, highest probability first."""
    if len(kg) == 0:
        logger.warning("question %s: empty knowledge graph, no chains", question_id or question[:40])
        return []
    beam = beam_search(question, kg, cfg, ranker, selector, stats, executor)
    return [_to_chain(h, kg, question_id) for h in beam]


def top_t_triples(question: str, kg: KnowledgeGraph, T: int, ranker: Ranker) -> list[KnowledgeTriple]:
    """The T triples most similar to the question alone, without chain construction."""
    if T < 1:
        raise ValueError("T must be ≥ 1")
    return [kg.triples[i] for i, _ in ranker.rank_candidates(question, [], kg, T)]

