"""Knowledge-grounded reasoning chains for multi-hop question answering."""

__version__ = "0.1.0"

from .backends import (  # noqa: E402
    EmbeddingRequest,
    GenerationRequest,
    OpenAICompatibleBackend,
    OptionLogitRequest,
    ScriptedBackend,
)
from .chains import ChainConfig, ReasoningChain, construct_chains, top_t_triples  # noqa: E402
from .corpus import DemoStore, KGCache, load_dataset, select_demonstrations  # noqa: E402
from .evaluation import EvalReport, evaluate_run, exact_match, f1, normalize_answer  # noqa: E402
from .kg import KnowledgeGraph, assemble_question_kg, parse_triples  # noqa: E402
from .ranker import TripleRanker, format_query  # noqa: E402
from .reader import build_context, order_triples, vote_documents  # noqa: E402
from .schema import Document, KnowledgeTriple, QAItem  # noqa: E402
from .selector import TripleSelector, build_selection_prompt, triple_distribution  # noqa: E402

__all__ = [
    "ChainConfig", "DemoStore", "Document", "EmbeddingRequest", "EvalReport", "GenerationRequest", "KGCache",
    "KnowledgeGraph", "KnowledgeTriple", "OpenAICompatibleBackend", "OptionLogitRequest", "QAItem",
    "ReasoningChain", "ScriptedBackend", "TripleRanker", "TripleSelector", "assemble_question_kg",
    "build_context", "build_selection_prompt", "construct_chains", "evaluate_run", "exact_match", "f1",
    "format_query", "load_dataset", "normalize_answer", "order_triples", "parse_triples",
    "select_demonstrations", "top_t_triples", "triple_distribution", "vote_documents",
]
