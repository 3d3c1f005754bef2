"""Strict JSON run-configuration file: one file drives every subcommand.

Unknown keys are rejected at every level so typos fail before anything
executes. Relative paths are resolved against the config file's directory.
Command-line flags override config values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from .errors import ConfigError
from .ingest import ChunkingParams
from .providers import ProviderSpec
from .retrieval import RetrievalConfig

_PROVIDER_KEYS = {"endpoint", "model_tag", "timeout_ms", "max_batch", "retries",
                  "backoff_s"}
_CHUNKING_KEYS = {"max_tokens", "min_paragraph_tokens", "min_chunk_tokens"}
_RETRIEVAL_KEYS = {"retrieval_mode", "coarse", "k_sections", "reranker",
                   "reformulation", "n_candidates", "top_passages",
                   "context_token_budget", "rrf_k"}
_GRID_KEYS = {"llm_model", "index", "retrieval_mode", "coarse_mode", "reranker",
              "reformulation", "prompt_mode"}
_TOP_KEYS = {"corpus_dir", "chunks_path", "chunking", "index_dir", "dataset_path",
             "out_dir", "providers", "retrieval", "index", "llm_model",
             "prompt_mode", "timing", "cache_dir", "grid"}
_PROVIDERS_KEYS = {"embedders", "generators", "reranker"}


def _reject_unknown(obj: dict, allowed: set, context: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")


def _provider_spec(obj: dict, kind: str, context: str) -> ProviderSpec:
    if not isinstance(obj, dict):
        raise ConfigError(f"{context}: provider spec must be an object")
    _reject_unknown(obj, _PROVIDER_KEYS, context)
    if "endpoint" not in obj:
        raise ConfigError(f"{context}: provider spec needs an endpoint")
    return ProviderSpec(kind=kind, **obj)


@dataclass
class RunConfig:
    base_dir: Path
    corpus_dir: Optional[Path] = None
    chunks_path: Optional[Path] = None
    chunking: ChunkingParams = field(default_factory=ChunkingParams)
    index_dir: Optional[Path] = None
    dataset_path: Optional[Path] = None
    out_dir: Optional[Path] = None
    embedders: Dict[str, ProviderSpec] = field(default_factory=dict)
    generators: Dict[str, ProviderSpec] = field(default_factory=dict)
    reranker: Optional[ProviderSpec] = None
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    rag: bool = True
    index: Optional[str] = None
    llm_model: Optional[str] = None
    prompt_mode: str = "zero_shot"
    timing: str = "wall"
    cache_dir: Optional[Path] = None
    grid_axes: Dict[str, List[str]] = field(default_factory=dict)

    def require(self, *names: str) -> None:
        for name in names:
            if getattr(self, name) in (None, {}, []):
                raise ConfigError(f"config is missing required field {name!r}")

    def require_paths_exist(self, *names: str) -> None:
        for name in names:
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"config {name} path does not exist: {path}")


def load_run_config(path: str | Path, overrides: Optional[dict] = None) -> RunConfig:
    """Parse and validate a run-config JSON file; flags override file values."""
    cfg_path = Path(path)
    try:
        raw = json.loads(cfg_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {cfg_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{cfg_path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{cfg_path}: config must be a JSON object")
    raw.update(overrides or {})
    _reject_unknown(raw, _TOP_KEYS, str(cfg_path))

    base = cfg_path.parent.resolve()

    def resolve(key: str) -> Optional[Path]:
        value = raw.get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p

    chunking = ChunkingParams()
    if "chunking" in raw:
        _reject_unknown(raw["chunking"], _CHUNKING_KEYS, f"{cfg_path}: chunking")
        chunking = ChunkingParams(**raw["chunking"])

    # retrieval_mode "none" at the config layer means a NO-RAG run; the
    # RetrievalConfig type itself stays dense/hybrid only.
    rag = True
    retrieval = RetrievalConfig()
    if "retrieval" in raw:
        _reject_unknown(raw["retrieval"], _RETRIEVAL_KEYS, f"{cfg_path}: retrieval")
        ret = dict(raw["retrieval"])
        if ret.get("retrieval_mode") == "none":
            rag = False
            ret.pop("retrieval_mode")
        retrieval = RetrievalConfig(**ret)

    embedders: Dict[str, ProviderSpec] = {}
    generators: Dict[str, ProviderSpec] = {}
    reranker: Optional[ProviderSpec] = None
    if "providers" in raw:
        pr = raw["providers"]
        _reject_unknown(pr, _PROVIDERS_KEYS, f"{cfg_path}: providers")
        for name, spec in pr.get("embedders", {}).items():
            embedders[name] = _provider_spec(spec, "embedding",
                                             f"{cfg_path}: providers.embedders.{name}")
        for name, spec in pr.get("generators", {}).items():
            generators[name] = _provider_spec(spec, "generator",
                                              f"{cfg_path}: providers.generators.{name}")
        if pr.get("reranker") is not None:
            reranker = _provider_spec(pr["reranker"], "reranker",
                                      f"{cfg_path}: providers.reranker")

    grid_axes: Dict[str, List[str]] = {}
    if "grid" in raw:
        _reject_unknown(raw["grid"], _GRID_KEYS, f"{cfg_path}: grid")
        grid_axes = {k: list(v) for k, v in raw["grid"].items()}

    timing = raw.get("timing", "wall")
    if timing not in ("wall", "deterministic"):
        raise ConfigError(f"{cfg_path}: timing must be 'wall' or 'deterministic'")

    return RunConfig(
        base_dir=base,
        corpus_dir=resolve("corpus_dir"),
        chunks_path=resolve("chunks_path"),
        chunking=chunking,
        index_dir=resolve("index_dir"),
        dataset_path=resolve("dataset_path"),
        out_dir=resolve("out_dir"),
        embedders=embedders,
        generators=generators,
        reranker=reranker,
        retrieval=retrieval,
        rag=rag,
        index=raw.get("index"),
        llm_model=raw.get("llm_model"),
        prompt_mode=raw.get("prompt_mode", "zero_shot"),
        timing=timing,
        cache_dir=resolve("cache_dir"),
        grid_axes=grid_axes,
    )
