"""Model backends: text generation, option-token scoring and text embedding.

Two implementations share one interface:

* :class:`ScriptedBackend` answers from a JSON table and is fully deterministic.
* :class:`OpenAICompatibleBackend` speaks the ``/v1/chat/completions`` and
  ``/v1/embeddings`` wire protocol of local inference servers and hosted APIs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Literal, Sequence

import numpy as np
import requests

logger = logging.getLogger(__name__)

Role = Literal["query", "passage"]

API_KEY_ENV = "TRACE_API_KEY"


class BackendError(RuntimeError):
    """Base class for backend failures."""

    retryable = False


class TransportError(BackendError):
    """The backend could not be reached, or answered with a server error."""

    retryable = True

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")
        self.attempts = attempts


class ContextLimitError(BackendError):
    def __init__(self, limit: int | None, detail: str = ""):
        msg = f"prompt exceeds backend context limit of {limit} tokens" if limit else "prompt exceeds backend context limit"
        super().__init__(f"{msg}{': ' + detail if detail else ''}")
        self.limit = limit


class NoScriptedResponse(BackendError):
    pass


class MultiTokenLabelError(BackendError):
    def __init__(self, labels: Sequence[str]):
        super().__init__(f"option labels are not single tokens: {', '.join(repr(x) for x in labels)}")
        self.labels = list(labels)


class LogitsUnavailableError(BackendError):
    pass


class BackendContractError(BackendError):
    """The backend returned something that violates its own contract."""


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_tokens: int = 256
    stop_sequences: tuple[str, ...] = ()
    temperature: float = 0.0

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be ≥ 1")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))


@dataclass(frozen=True)
class OptionLogitRequest:
    prompt: str
    option_labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(self.option_labels)
        if not labels:
            raise ValueError("option_labels must be non-empty")
        if len(set(labels)) != len(labels):
            raise ValueError("option_labels must be pairwise distinct")
        object.__setattr__(self, "option_labels", labels)


@dataclass(frozen=True)
class EmbeddingRequest:
    texts: tuple[str, ...]
    role: Role = "passage"

    def __post_init__(self):
        texts = tuple(self.texts)
        if not texts:
            raise ValueError("texts must be non-empty")
        if self.role not in ("query", "passage"):
            raise ValueError(f"unknown embedding role {self.role!r}")
        object.__setattr__(self, "texts", texts)


def whitespace_tokens(text: str) -> int:
    return len(text.split())


def truncate_at_stop(text: str, stops: Iterable[str]) -> str:
    cut = len(text)
    for stop in stops:
        if stop:
            i = text.find(stop)
            if i != -1:
                cut = min(cut, i)
    return text[:cut]


def check_dimensions(vectors: list[list[float]]) -> list[list[float]]:
    dims = {len(v) for v in vectors}
    if len(dims) != 1 or 0 in dims:
        raise BackendContractError(f"embedding batch has inconsistent dimensions {sorted(dims)}")
    return vectors


class Backend:
    """Common interface. Subclasses implement the ``_generate``/``_option_logits``/``_embed`` hooks.

    Every public call is counted in :attr:`calls` (thread-safe) so callers can
    assert call budgets.
    """

    name = "backend"
    supports_logits = True
    query_prefix = ""
    passage_prefix = ""

    def __init__(self, max_in_flight: int = 8):
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        self._lock = threading.Lock()
        self.calls: Counter[str] = Counter()

    def _count(self, kind: str) -> None:
        with self._lock:
            self.calls[kind] += 1

    def generate(self, req: GenerationRequest) -> str:
        self._count("generate")
        with self._slots:
            return self._generate(req)

    def option_logits(self, req: OptionLogitRequest) -> dict[str, float]:
        self._count("option_logits")
        if not self.supports_logits:
            raise LogitsUnavailableError(
                f"{self.name} backend does not expose token logits; point the selector at a "
                "logit-capable endpoint (chat completions with logprobs/top_logprobs) or use degraded mode"
            )
        bad = [lab for lab in req.option_labels if not self.is_single_token(lab)]
        if bad:
            raise MultiTokenLabelError(bad)
        with self._slots:
            logits = self._option_logits(req)
        return {lab: float(logits[lab]) for lab in req.option_labels}

    def embed(self, req: EmbeddingRequest) -> list[list[float]]:
        self._count("embed")
        prefix = self.query_prefix if req.role == "query" else self.passage_prefix
        with self._slots:
            vectors = self._embed([prefix + t for t in req.texts])
        if len(vectors) != len(req.texts):
            raise BackendContractError(f"expected {len(req.texts)} embeddings, got {len(vectors)}")
        return check_dimensions(vectors)

    def is_single_token(self, label: str) -> bool:
        return len(label) == 1 and label.isalnum()

    def count_tokens(self, text: str) -> int | None:
        """Backend tokenizer count, or None when the backend has no tokenizer access."""
        return None

    def _generate(self, req: GenerationRequest) -> str:
        raise NotImplementedError

    def _option_logits(self, req: OptionLogitRequest) -> dict[str, float]:
        raise NotImplementedError

    def _embed(self, texts: list[str]) -> list[list[float]]:
        raise NotImplementedError


def _matches(rule: dict, text: str) -> bool:
    pattern = rule.get("match", "")
    if rule.get("exact"):
        return text == pattern
    if isinstance(pattern, list):
        return all(p in text for p in pattern)
    return pattern in text


def hashed_unit_vector(text: str, dim: int, seed: int = 0) -> list[float]:
    """Deterministic pseudo-random unit vector derived from ``text``."""
    digest = hashlib.sha256(f"{seed}\x00{text}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).tolist()


class ScriptedBackend(Backend):
    """Table-driven backend for tests and golden runs.

    The script is a JSON document::

        {
          "strict": false,
          "generations":   [{"match": "substring" | ["all", "of"], "response": "..."}],
          "option_logits": [{"match": ..., "logits": {"A": 0.0, "B": 2.0}}],
          "embeddings":    [{"match": ..., "vector": [...], "exact": false}]
        }

    Rules are tried in order and the first match wins. Unmatched embeddings fall
    back to a hashed unit vector of ``embedding_dim`` dimensions.
    """

    name = "scripted"

    def __init__(self, script: dict | None = None, *, strict: bool | None = None, source: str = "<inline>"):
        script = dict(script or {})
        super().__init__(max_in_flight=int(script.get("max_in_flight", 64)))
        self.source = source
        self.strict = bool(script.get("strict", False)) if strict is None else strict
        self.generations: list[dict] = list(script.get("generations", []))
        self.logit_rules: list[dict] = list(script.get("option_logits", []))
        self.embedding_rules: list[dict] = list(script.get("embeddings", []))
        self.embedding_dim = int(script.get("embedding_dim", 16))
        self.embedding_seed = int(script.get("embedding_seed", 0))
        self.context_limit = script.get("context_limit")
        self.supports_logits = bool(script.get("supports_logits", True))
        self.multi_token_labels = set(script.get("multi_token_labels", []))
        self.query_prefix = script.get("query_prefix", "query: ")
        self.passage_prefix = script.get("passage_prefix", "")
        for rule in self.embedding_rules:
            if len(rule["vector"]) != self.embedding_dim:
                raise ValueError(
                    f"{source}: scripted vector for {rule.get('match')!r} has dimension "
                    f"{len(rule['vector'])}, expected embedding_dim={self.embedding_dim}"
                )

    @classmethod
    def from_file(cls, path: str | os.PathLike, *, strict: bool | None = None) -> "ScriptedBackend":
        path = Path(path)
        with path.open(encoding="utf-8") as fh:
            script = json.load(fh)
        return cls(script, strict=strict, source=str(path))

    def is_single_token(self, label: str) -> bool:
        return label not in self.multi_token_labels and len(label) == 1

    def _check_context(self, prompt: str) -> None:
        if self.context_limit is not None:
            n = whitespace_tokens(prompt)
            if n > self.context_limit:
                raise ContextLimitError(int(self.context_limit), f"prompt has {n} tokens")

    def _generate(self, req: GenerationRequest) -> str:
        self._check_context(req.prompt)
        for rule in self.generations:
            if _matches(rule, req.prompt):
                return truncate_at_stop(rule["response"], req.stop_sequences).strip()
        if self.strict:
            raise NoScriptedResponse(f"no scripted response for prompt ending {req.prompt[-80:]!r}")
        return ""

    def _option_logits(self, req: OptionLogitRequest) -> dict[str, float]:
        self._check_context(req.prompt)
        for rule in self.logit_rules:
            if _matches(rule, req.prompt):
                table = rule["logits"]
                missing = [lab for lab in req.option_labels if lab not in table]
                if missing and self.strict:
                    raise NoScriptedResponse(f"scripted logits lack labels {missing}")
                present = [float(table[lab]) for lab in req.option_labels if lab in table]
                floor = (min(present) - 10.0) if present else 0.0
                return {lab: float(table.get(lab, floor)) for lab in req.option_labels}
        if self.strict:
            raise NoScriptedResponse(f"no scripted option logits for prompt ending {req.prompt[-80:]!r}")
        return {lab: 0.0 for lab in req.option_labels}

    def _embed(self, texts: list[str]) -> list[list[float]]:
        out = []
        for text in texts:
            for rule in self.embedding_rules:
                if _matches(rule, text):
                    out.append([float(x) for x in rule["vector"]])
                    break
            else:
                out.append(hashed_unit_vector(text, self.embedding_dim, self.embedding_seed))
        return out


_CONTEXT_RE = re.compile(r"maximum context length is (\d+)")


class OpenAICompatibleBackend(Backend):
    """HTTP client for OpenAI-compatible chat-completion and embedding endpoints.

    Option scoring issues a one-token completion with ``top_logprobs`` and reads
    the log-probabilities of the option labels; labels missing from the returned
    top set get ``min(returned) - 10``.
    """

    name = "http"
    retry_attempts = 3
    retry_backoff = 0.5

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_in_flight: int = 8,
        embedding_model: str | None = None,
        query_prefix: str = "",
        passage_prefix: str = "",
        supports_logits: bool = True,
        max_top_logprobs: int = 20,
        tokenize_url: str | None = None,
        context_limit: int | None = None,
        session: requests.Session | None = None,
    ):
        super().__init__(max_in_flight=max_in_flight)
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.embedding_model = embedding_model or model
        self.api_key = os.environ.get(API_KEY_ENV) or api_key
        self.timeout = timeout
        self.query_prefix = query_prefix
        self.passage_prefix = passage_prefix
        self.supports_logits = supports_logits
        self.max_top_logprobs = max_top_logprobs
        self.tokenize_url = tokenize_url
        self.context_limit = context_limit
        self.session = session or requests.Session()
        self._token_cache: dict[str, int] = {}
        self._label_cache: dict[str, bool] = {}

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, url: str, payload: dict) -> dict:
        delay = self.retry_backoff
        last = ""
        for attempt in range(1, self.retry_attempts + 1):
            try:
                resp = self.session.post(url, json=payload, headers=self._headers(), timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code < 400:
                    return resp.json()
                body = resp.text
                if resp.status_code >= 500:
                    last = f"HTTP {resp.status_code} from {url}: {body[:200]}"
                else:
                    if "context length" in body or "context_length" in body:
                        m = _CONTEXT_RE.search(body)
                        raise ContextLimitError(int(m.group(1)) if m else self.context_limit, body[:200])
                    raise BackendError(f"HTTP {resp.status_code} from {url}: {body[:200]}")
            if attempt < self.retry_attempts:
                logger.warning("backend request failed (attempt %d): %s", attempt, last)
                time.sleep(delay)
                delay *= 2
        raise TransportError(last, attempts=self.retry_attempts)

    def _chat_payload(self, prompt: str, max_tokens: int, temperature: float) -> dict[str, Any]:
        if self.context_limit is not None:
            n = self.count_tokens(prompt)
            if n is not None and n + max_tokens > self.context_limit:
                raise ContextLimitError(self.context_limit, f"prompt has {n} tokens")
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": max_tokens,
            "temperature": temperature,
        }

    def _generate(self, req: GenerationRequest) -> str:
        payload = self._chat_payload(req.prompt, req.max_tokens, req.temperature)
        if req.stop_sequences:
            payload["stop"] = list(req.stop_sequences)
        data = self._post(f"{self.base_url}/v1/chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendContractError(f"malformed chat completion response: {data!r:.200}") from exc
        return truncate_at_stop(text, req.stop_sequences).strip()

    def _option_logits(self, req: OptionLogitRequest) -> dict[str, float]:
        payload = self._chat_payload(req.prompt, 1, 0.0)
        payload["logprobs"] = True
        payload["top_logprobs"] = min(max(len(req.option_labels), 1), self.max_top_logprobs)
        data = self._post(f"{self.base_url}/v1/chat/completions", payload)
        try:
            top = data["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise LogitsUnavailableError(
                f"endpoint {self.base_url} returned no logprobs; use a logit-capable endpoint"
            ) from exc
        seen: dict[str, float] = {}
        for item in top:
            tok = str(item.get("token", "")).strip()
            lp = float(item["logprob"])
            if tok in req.option_labels and lp > seen.get(tok, -np.inf):
                seen[tok] = lp
        returned = [float(item["logprob"]) for item in top]
        if not returned:
            raise LogitsUnavailableError(f"endpoint {self.base_url} returned an empty top_logprobs list")
        floor = min(returned) - 10.0
        return {lab: seen.get(lab, floor) for lab in req.option_labels}

    def _embed(self, texts: list[str]) -> list[list[float]]:
        data = self._post(f"{self.base_url}/v1/embeddings", {"model": self.embedding_model, "input": texts})
        try:
            rows = sorted(data["data"], key=lambda r: r.get("index", 0))
            return [list(map(float, r["embedding"])) for r in rows]
        except (KeyError, TypeError) as exc:
            raise BackendContractError(f"malformed embeddings response: {data!r:.200}") from exc

    def _tokenize(self, text: str) -> list | None:
        if not self.tokenize_url:
            return None
        data = self._post(self.tokenize_url, {"model": self.model, "prompt": text, "add_special_tokens": False})
        return data.get("tokens")

    def is_single_token(self, label: str) -> bool:
        if not self.tokenize_url:
            return super().is_single_token(label)
        if label not in self._label_cache:
            tokens = self._tokenize(label)
            self._label_cache[label] = tokens is not None and len(tokens) == 1
        return self._label_cache[label]

    def count_tokens(self, text: str) -> int | None:
        if not self.tokenize_url:
            return None
        if text not in self._token_cache:
            tokens = self._tokenize(text)
            if tokens is None:
                return None
            self._token_cache[text] = len(tokens)
        return self._token_cache[text]


def backend_from_config(kind: str, options: dict, base_dir: Path | None = None) -> Backend:
    if kind == "scripted":
        script = Path(options["script"])
        if base_dir is not None and not script.is_absolute():
            script = base_dir / script
        return ScriptedBackend.from_file(script, strict=options.get("strict"))
    if kind == "http":
        opts = {k: v for k, v in options.items() if k not in ("base_url", "model")}
        return OpenAICompatibleBackend(options["base_url"], options["model"], **opts)
    raise ValueError(f"unknown backend kind {kind!r}")
