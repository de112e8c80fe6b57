"""Run configuration: a single JSON document plus dotted-path overrides."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

DEFAULT_K = 20
# Best-performing candidate counts reported for the K sweep; other datasets use DEFAULT_K.
K_PER_DATASET = {"hotpotqa": 20, "twowiki": 30}


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BackendConfig(_Strict):
    kind: Literal["http", "scripted"]
    script: str | None = None
    strict: bool | None = None
    base_url: str | None = None
    model: str | None = None
    embedding_model: str | None = None
    api_key: str | None = None
    timeout: float = Field(60.0, gt=0)
    max_in_flight: int = Field(8, ge=1)
    query_prefix: str = ""
    passage_prefix: str = ""
    supports_logits: bool = True
    max_top_logprobs: int = Field(20, ge=1)
    tokenize_url: str | None = None
    context_limit: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _required(self):
        if self.kind == "scripted" and not self.script:
            raise ValueError("scripted backend needs 'script'")
        if self.kind == "http" and not (self.base_url and (self.model or self.embedding_model)):
            raise ValueError("http backend needs 'base_url' and 'model' (or 'embedding_model' for an embedder)")
        return self

    def http_options(self) -> dict[str, Any]:
        keys = ("embedding_model", "api_key", "timeout", "max_in_flight", "query_prefix", "passage_prefix",
                "supports_logits", "max_top_logprobs", "tokenize_url", "context_limit")
        return {k: getattr(self, k) for k in keys}


class BackendsConfig(_Strict):
    generator: BackendConfig
    selector: BackendConfig
    embedder: BackendConfig


class DatasetConfig(_Strict):
    path: str
    format: Literal["hotpotqa", "twowiki", "musique"]


class ChainSettings(_Strict):
    L: int = Field(4, ge=1)
    R: int = Field(5, ge=1)
    b: int = Field(5, ge=1)
    K: int | None = Field(None, ge=1)
    fixed_length: bool = False
    exclude_selected: bool = True


class PathsConfig(_Strict):
    output_dir: str = "runs/default"
    kg_cache: str | None = None
    kg_demos: str | None = None
    chain_demos: str | None = None


class VotingConfig(_Strict):
    weighted: bool = False
    unique: bool = False


class RunConfig(_Strict):
    dataset: DatasetConfig
    backends: BackendsConfig
    chain: ChainSettings = ChainSettings()
    mode: Literal["triple", "doc", "none", "all_docs", "top_t"] = "triple"
    top_t: int = Field(10, ge=1)
    paths: PathsConfig = PathsConfig()
    voting: VotingConfig = VotingConfig()
    num_demos: int = Field(3, ge=0)
    workers: int = Field(1, ge=1)
    limit: int | None = Field(None, ge=0)

    def effective_K(self) -> int:
        if self.chain.K is not None:
            return self.chain.K
        return K_PER_DATASET.get(self.dataset.format, DEFAULT_K)


def parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(data: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        nxt = node.get(key)
        if not isinstance(nxt, dict):
            nxt = node[key] = {}
        node = nxt
    node[keys[-1]] = value


def parse_overrides(args: list[str]) -> dict[str, Any]:
    """``--a.b value`` / ``--a.b=value`` pairs into a dotted-path mapping."""
    out: dict[str, Any] = {}
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--") or len(arg) == 2:
            raise ConfigError(f"unexpected argument {arg!r}; overrides look like --section.field VALUE")
        key = arg[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"override {arg} needs a value")
            raw = args[i + 1]
            i += 2
        out[key] = parse_value(raw)
    return out


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "\n".join(lines)


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    for key, value in (overrides or {}).items():
        apply_override(data, key, value)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{format_validation_error(exc)}") from exc
