"""End-to-end stages: build-kg, construct-chains, answer, evaluate.

Every stage reads the artifacts of the previous one from the output directory
and writes its own JSON-lines artifact, headed by a record that carries the
pipeline version and the config snapshot.
"""

from __future__ import annotations

import contextvars
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from . import __version__
from .backends import Backend, OpenAICompatibleBackend, ScriptedBackend
from .chains import ChainConfig, ReasoningChain, SearchStats, construct_chains, top_t_triples
from .config import BackendConfig, RunConfig
from .corpus import DemoStore, KGCache, LoadReport, get_or_generate_kg, load_dataset
from .evaluation import EvalReport, evaluate_run
from .kg import KnowledgeGraph, assemble_question_kg, generate_document_kg
from .ranker import TripleRanker
from .reader import PredictionRecord, answer, build_context
from .schema import QAItem
from .selector import TripleSelector

logger = logging.getLogger(__name__)

_stage: contextvars.ContextVar[str] = contextvars.ContextVar("stage", default="")
_question: contextvars.ContextVar[str] = contextvars.ContextVar("question_id", default="")

KG_FILE = "kgs.jsonl"
CHAINS_FILE = "chains.jsonl"
PREDICTIONS_FILE = "predictions.jsonl"
REPORT_FILE = "report.json"
CALL_LOG_FILE = "calls.jsonl"


class MissingArtifactError(RuntimeError):
    pass


class CallLog:
    """Thread-safe JSON-lines sink for backend call records."""

    def __init__(self, path: Path | None):
        self.path = path
        self._lock = threading.Lock()
        self.records: list[dict] = []

    def record(self, **fields: Any) -> None:
        with self._lock:
            self.records.append(fields)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(fields) + "\n")

    def count(self, *, stage: str | None = None, role: str | None = None, kind: str | None = None) -> int:
        with self._lock:
            return sum(
                (stage is None or r["stage"] == stage) and (role is None or r["role"] == role)
                and (kind is None or r["kind"] == kind)
                for r in self.records
            )


class InstrumentedBackend:
    """Wraps a backend and logs stage, question id and latency of each call."""

    def __init__(self, inner: Backend, role: str, log: CallLog):
        self.inner = inner
        self.role = role
        self.log = log

    def __getattr__(self, name: str):
        return getattr(self.inner, name)

    def _timed(self, kind: str, fn: Callable, req):
        start = time.perf_counter()
        ok = False
        try:
            out = fn(req)
            ok = True
            return out
        finally:
            self.log.record(stage=_stage.get(), question_id=_question.get(), role=self.role, kind=kind,
                            latency_ms=round(1000 * (time.perf_counter() - start), 3), ok=ok)

    def generate(self, req):
        return self._timed("generate", self.inner.generate, req)

    def option_logits(self, req):
        return self._timed("option_logits", self.inner.option_logits, req)

    def embed(self, req):
        return self._timed("embed", self.inner.embed, req)


def make_backend(bc: BackendConfig, base_dir: Path) -> Backend:
    if bc.kind == "scripted":
        script = Path(bc.script)
        if not script.is_absolute():
            script = base_dir / script
        return ScriptedBackend.from_file(script, strict=bc.strict)
    return OpenAICompatibleBackend(bc.base_url, bc.model or bc.embedding_model, **bc.http_options())


def write_artifact(path: Path, header: dict, records: Iterable[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, ensure_ascii=False) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def read_artifact(path: Path) -> tuple[dict, list[dict]]:
    lines = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines or lines[0].get("type") != "header":
        raise ValueError(f"{path} is not a pipeline artifact (missing header)")
    return lines[0], lines[1:]


@dataclass
class StageResult:
    stage: str
    processed: int = 0
    failed: int = 0


class Pipeline:
    def __init__(self, cfg: RunConfig, base_dir: str | os.PathLike = ".", *, call_log_path: Path | None = None):
        self.cfg = cfg
        self.base_dir = Path(base_dir)
        self.out_dir = self.resolve(cfg.paths.output_dir)
        self.call_log = CallLog(call_log_path if call_log_path is not None else self.out_dir / CALL_LOG_FILE)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    # -- inputs ---------------------------------------------------------------

    @cached_property
    def items(self) -> list[QAItem]:
        report = LoadReport()
        items = load_dataset(self.resolve(self.cfg.dataset.path), self.cfg.dataset.format, report)
        if report.skipped:
            logger.warning("dataset: %d records skipped", report.skipped)
        if self.cfg.limit is not None:
            items = items[: self.cfg.limit]
        return items

    def _backend(self, role: str) -> InstrumentedBackend:
        bc = getattr(self.cfg.backends, role)
        return InstrumentedBackend(make_backend(bc, self.base_dir), role, self.call_log)

    @cached_property
    def generator(self) -> InstrumentedBackend:
        return self._backend("generator")

    @cached_property
    def selector_backend(self) -> InstrumentedBackend:
        return self._backend("selector")

    @cached_property
    def embedder(self) -> InstrumentedBackend:
        return self._backend("embedder")

    def _demo_path(self, configured: str | None, bundled: str) -> Path:
        if configured is not None:
            return self.resolve(configured)
        return Path(str(resources.files("tracerag").joinpath("data", bundled)))

    @cached_property
    def kg_demos(self) -> DemoStore | None:
        if self.cfg.num_demos == 0:
            return None
        return DemoStore.from_file(self._demo_path(self.cfg.paths.kg_demos, "kg_demos.json"), self.embedder)

    @cached_property
    def chain_demos(self) -> DemoStore | None:
        if self.cfg.num_demos == 0:
            return None
        return DemoStore.from_file(self._demo_path(self.cfg.paths.chain_demos, "chain_demos.json"), self.embedder)

    @cached_property
    def kg_cache(self) -> KGCache:
        path = self.cfg.paths.kg_cache
        return KGCache(self.resolve(path) if path is not None else self.out_dir / "kg_cache.jsonl")

    def chain_config(self) -> ChainConfig:
        c = self.cfg.chain
        return ChainConfig(L=c.L, R=c.R, b=c.b, K=self.cfg.effective_K(), fixed_length=c.fixed_length)

    def header(self, stage: str) -> dict:
        snapshot = self.cfg.model_dump(mode="json")
        for role in ("generator", "selector", "embedder"):
            if snapshot["backends"][role].get("api_key"):
                snapshot["backends"][role]["api_key"] = "<redacted>"
        return {"type": "header", "stage": stage, "pipeline_version": __version__, "config": snapshot}

    def _map(self, fn: Callable[[QAItem], dict], items: Sequence[QAItem]) -> list[dict]:
        stage = _stage.get()

        def run(item: QAItem) -> dict:
            _stage.set(stage)
            _question.set(item.id)
            try:
                return fn(item)
            except Exception as exc:  # per-question failure; the batch continues
                logger.error("%s: question %s failed: %s", stage, item.id, exc)
                return {"id": item.id, "error": f"{type(exc).__name__}: {exc}"}

        if self.cfg.workers == 1:
            return [contextvars.copy_context().run(run, it) for it in items]
        with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
            return list(pool.map(lambda it: contextvars.copy_context().run(run, it), items))

    # -- stage helpers --------------------------------------------------------

    def _generate_kg(self, doc, doc_index: int):
        return generate_document_kg(doc, self.generator, self.kg_demos, doc_index=doc_index, n_demos=self.cfg.num_demos)

    def question_kg(self, item: QAItem, *, generate: bool = False) -> KnowledgeGraph:
        per_doc = []
        for i, doc in enumerate(item.documents):
            if generate:
                per_doc.append(get_or_generate_kg(doc, lambda d, i=i: self._generate_kg(d, i), self.kg_cache, i))
            else:
                triples = self.kg_cache.get(doc)
                if triples is None:
                    raise MissingArtifactError(f"KG cache has no triples for document {doc.title!r}; run `trace build-kg` first")
                per_doc.append([t.with_source(i, doc.title) for t in triples])
        return assemble_question_kg(per_doc)

    def _kg_records(self) -> dict[str, dict]:
        path = self.out_dir / KG_FILE
        if not path.exists():
            raise MissingArtifactError(f"{path} not found; run `trace build-kg` first")
        _, records = read_artifact(path)
        return {r["id"]: r for r in records}

    def _question_kg_checked(self, item: QAItem, kg_records: dict[str, dict]) -> KnowledgeGraph:
        rec = kg_records.get(item.id)
        if rec is not None and "error" in rec:
            raise RuntimeError(f"knowledge graph construction failed: {rec['error']}")
        return self.question_kg(item)

    def _finish(self, stage: str, records: list[dict]) -> StageResult:
        failed = sum("error" in r for r in records)
        return StageResult(stage, len(records), failed)

    # -- stages ---------------------------------------------------------------

    def build_kg(self) -> StageResult:
        _stage.set("build-kg")

        self.generator, self.kg_demos, self.kg_cache  # build shared state before fanning out

        def work(item: QAItem) -> dict:
            kg = self.question_kg(item, generate=True)
            return {"id": item.id, **kg.stats}

        records = self._map(work, self.items)
        write_artifact(self.out_dir / KG_FILE, self.header("build-kg"), records)
        return self._finish("build-kg", records)

    def construct_chains(self) -> StageResult:
        _stage.set("construct-chains")
        kg_records = self._kg_records()
        cfg = self.chain_config()
        ranker = TripleRanker(self.embedder, exclude_selected=self.cfg.chain.exclude_selected)
        selector = TripleSelector(self.selector_backend, self.chain_demos, n_demos=self.cfg.num_demos)

        def work(item: QAItem) -> dict:
            kg = self._question_kg_checked(item, kg_records)
            stats = SearchStats()
            chains = construct_chains(item.question, kg, cfg, ranker, selector, question_id=item.id, stats=stats)
            return {"id": item.id, "num_triples": len(kg), "selector_calls": stats.selector_calls,
                    "chains": [c.to_json() for c in chains]}

        records = self._map(work, self.items)
        write_artifact(self.out_dir / CHAINS_FILE, self.header("construct-chains"), records)
        return self._finish("construct-chains", records)

    def load_chains(self) -> dict[str, dict]:
        path = self.out_dir / CHAINS_FILE
        if not path.exists():
            raise MissingArtifactError(f"{path} not found; run `trace construct-chains` first")
        _, records = read_artifact(path)
        return {r["id"]: r for r in records}

    def answer(self) -> StageResult:
        _stage.set("answer")
        mode = self.cfg.mode
        chain_records = self.load_chains() if mode in ("triple", "doc") else {}
        ranker, kg_records = None, {}
        if mode == "top_t":
            kg_records = self._kg_records()
            ranker = TripleRanker(self.embedder)

        def work(item: QAItem) -> dict:
            chains: list[ReasoningChain] = []
            top = []
            if mode in ("triple", "doc"):
                rec = chain_records.get(item.id)
                if rec is None:
                    raise MissingArtifactError(f"no chains for question {item.id}; rerun `trace construct-chains`")
                if "error" in rec:
                    raise RuntimeError(f"chain construction failed: {rec['error']}")
                chains = [ReasoningChain.from_json(c, item.id) for c in rec["chains"]]
            elif mode == "top_t":
                top = top_t_triples(item.question, self._question_kg_checked(item, kg_records), self.cfg.top_t, ranker)
            bundle = build_context(mode, item.documents, chains, top_triples=top, backend=self.generator,
                                   weighted_votes=self.cfg.voting.weighted, unique_votes=self.cfg.voting.unique)
            return answer(item.question, bundle, self.generator, question_id=item.id, chains=chains).to_json()

        records = [
            {"id": r["id"], "answer": "", "mode": mode, "context_tokens": 0, "token_counter": "whitespace",
             "doc_titles": [], "error": r["error"]} if "error" in r else r
            for r in self._map(work, self.items)
        ]
        write_artifact(self.out_dir / PREDICTIONS_FILE, self.header("answer"), records)
        return self._finish("answer", records)

    def evaluate(self) -> EvalReport:
        _stage.set("evaluate")
        path = self.out_dir / PREDICTIONS_FILE
        if not path.exists():
            raise MissingArtifactError(f"{path} not found; run `trace answer` first")
        _, records = read_artifact(path)
        preds = [PredictionRecord.from_json(r) for r in records]
        chains: dict[str, list[ReasoningChain]] = {}
        if (self.out_dir / CHAINS_FILE).exists() and self.cfg.mode in ("triple", "doc"):
            for qid, rec in self.load_chains().items():
                chains[qid] = [ReasoningChain.from_json(c, qid) for c in rec.get("chains", [])]
        report = evaluate_run(preds, self.items, chains)
        out = self.header("evaluate")
        out["report"] = report.to_json()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / REPORT_FILE).write_text(json.dumps(out, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return report

    def run_all(self) -> tuple[list[StageResult], EvalReport]:
        results = []
        if self.cfg.mode in ("triple", "doc", "top_t"):
            results.append(self.build_kg())
        if self.cfg.mode in ("triple", "doc"):
            results.append(self.construct_chains())
        results.append(self.answer())
        return results, self.evaluate()
