"""Pluggable inference providers: embeddings, generation, rerank scoring.

Three capabilities sit behind small interfaces so every pipeline component is
testable without model weights:

* ``endpoint: "http(s)://..."``  - JSON-over-HTTP clients compatible with
  common open inference servers (chat-completions, embeddings, rerank routes).
* ``endpoint: "mock:<name>"``    - deterministic in-process mocks.
* ``endpoint: "file:<path>"``    - precomputed embedding lookup (JSONL of
  ``{"key": ..., "vector": [...]}``, keyed by input text or its sha256 hex).

``cached(provider, cache_dir)`` wraps any provider with a content-addressed
response cache keyed by (kind, model_tag, canonical input, params), enabling
offline replay of previously seen calls.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import requests

from .errors import ConfigError, ProviderError, ProviderTimeout
from .tokenizer import query_terms

STOPWORDS = frozenset("""
a an the of and or to in on with for is are was were be been has have had this
that these those it its as at by from into which who whom whose what when
where why how most likely following presents shows history old year years
""".split())


@dataclass(frozen=True)
class ProviderSpec:
    kind: str                 # embedding | generator | reranker
    endpoint: str             # http(s)://..., mock:<name>, file:<path>
    model_tag: str = ""
    timeout_ms: int = 30000
    max_batch: int = 32
    retries: int = 2
    backoff_s: float = 0.25

    def __post_init__(self) -> None:
        if self.kind not in ("embedding", "generator", "reranker"):
            raise ConfigError(f"unknown provider kind {self.kind!r}")
        if self.timeout_ms <= 0:
            raise ConfigError("timeout_ms must be positive")
        if self.max_batch < 1:
            raise ConfigError("max_batch must be >= 1")


@dataclass(frozen=True)
class GenerationParams:
    max_output_tokens: int = 512
    temperature: float = 0.0
    stop_sequences: tuple = ()

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def _apply_stops(text: str, stops: Sequence[str]) -> str:
    cut = len(text)
    for stop in stops:
        pos = text.find(stop)
        if pos != -1:
            cut = min(cut, pos)
    return text[:cut]


# --- deterministic mocks ---------------------------------------------------------

class TrigramHashEmbedder:
    """Hashed character-trigram counts in a fixed-dimension space.

    Pure function of the text: trigrams of the '^'-padded input are hashed
    with blake2b into one of ``dim`` signed buckets. Non-empty texts always
    produce a nonzero vector (padding guarantees at least one trigram).
    """

    def __init__(self, dim: int = 64, tag: str = "mock:trigram64"):
        self.dim = dim
        self.tag = tag

    def embed(self, texts: Sequence[str]) -> List[List[float]]:
        out = []
        for text in texts:
            vec = [0.0] * self.dim
            padded = f"^^{text.lower()}$$"
            for i in range(len(padded) - 2):
                digest = hashlib.blake2b(padded[i:i + 3].encode("utf-8"),
                                         digest_size=8).digest()
                h = int.from_bytes(digest, "little")
                vec[h % self.dim] += 1.0 if (h >> 32) % 2 == 0 else -1.0
            out.append(vec)
        return out


class FileEmbedder:
    """Embedding lookup from a JSONL file of {key, vector} records."""

    def __init__(self, path: str | Path, tag: str = "file"):
        self.tag = tag
        self._table: Dict[str, List[float]] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    self._table[obj["key"]] = obj["vector"]

    def embed(self, texts: Sequence[str]) -> List[List[float]]:
        out = []
        for text in texts:
            key = text if text in self._table else hashlib.sha256(
                text.encode("utf-8")).hexdigest()
            if key not in self._table:
                raise ProviderError(f"file embedder has no vector for {text[:40]!r}")
            out.append(list(self._table[key]))
        return out


class ScriptedGenerator:
    """Fixed prompt -> output mapping for tests; unknown prompts error."""

    def __init__(self, script: Dict[str, str], default: str | None = None,
                 tag: str = "mock:scripted"):
        self.script = script
        self.default = default
        self.tag = tag
        self.calls = 0

    def generate(self, prompt: str, params: GenerationParams) -> str:
        self.calls += 1
        if prompt in self.script:
            return _apply_stops(self.script[prompt], params.stop_sequences)
        if self.default is not None:
            return _apply_stops(self.default, params.stop_sequences)
        raise ProviderError("scripted generator has no entry for this prompt")


class KeywordMockGenerator:
    """Answers multiple-choice prompts by lexical overlap with the evidence.

    For answer prompts (containing an ``Options:`` block) each option is
    scored by how often its informative tokens occur in the evidence block
    (falling back to the question when no evidence is present); the winner is
    emitted as ``Answer: <letter>``, after a canned reasoning line in CoT
    mode. For reformulation prompts it returns the informative tokens of the
    question as a one-line query. Pure and deterministic.
    """

    tag = "mock:keyword"

    def generate(self, prompt: str, params: GenerationParams) -> str:
        if "Options:" in prompt:
            return _apply_stops(self._answer(prompt), params.stop_sequences)
        return _apply_stops(self._reformulate(prompt), params.stop_sequences)

    @staticmethod
    def _informative(text: str) -> List[str]:
        return [t for t in query_terms(text)
                if t.isalnum() and len(t) > 2 and t not in STOPWORDS]

    def _answer(self, prompt: str) -> str:
        evidence = ""
        if "Evidence:" in prompt:
            evidence = prompt.split("Evidence:", 1)[1].split("Question:", 1)[0]
        question = prompt.split("Question:", 1)[-1].split("Options:", 1)[0]
        options: Dict[str, str] = {}
        in_options = False
        for line in prompt.splitlines():
            if line.strip() == "Options:":
                in_options = True
                continue
            if in_options:
                if len(line) > 2 and line[0].isupper() and line[1] == ".":
                    options[line[0]] = line[2:].strip()
                elif line.strip() == "":
                    break
        # term weights decay with passage rank so top evidence dominates
        context_terms: Dict[str, float] = {}
        if evidence:
            for line in evidence.splitlines():
                m = re.match(r"\[(\d+)\]", line.strip())
                weight = 1.0 / int(m.group(1)) if m else 0.0
                for t in self._informative(line):
                    context_terms[t] = context_terms.get(t, 0.0) + weight
        else:
            for t in self._informative(question):
                context_terms[t] = context_terms.get(t, 0.0) + 1.0
        best_letter, best_score = "A", -1.0
        for letter in sorted(options):
            score = sum(context_terms.get(t, 0.0) for t in self._informative(options[letter]))
            if score > best_score:
                best_letter, best_score = letter, score
        if "step by step" in prompt:
            return f"Reasoning: the evidence points to option {best_letter}.\nAnswer: {best_letter}"
        return f"Answer: {best_letter}"

    def _reformulate(self, prompt: str) -> str:
        # last non-empty line block is the vignette to compress
        vignette = prompt.split("Vignette:", 1)[-1]
        seen = []
        for t in self._informative(vignette):
            if t not in seen:
                seen.append(t)
        return " ".join(seen[:12])


class OverlapMockReranker:
    """Relevance = number of shared lowercased tokens between the pair."""

    tag = "mock:overlap"

    def score(self, query: str, passages: Sequence[str]) -> List[float]:
        q = set(query_terms(query))
        return [float(len(q & set(query_terms(p)))) for p in passages]


class FailingProvider:
    """Always raises; exercises degradation paths in tests."""

    tag = "mock:failing"

    def embed(self, texts):
        raise ProviderError("mock failure")

    def generate(self, prompt, params):
        raise ProviderError("mock failure")

    def score(self, query, passages):
        raise ProviderError("mock failure")


# --- HTTP providers -----------------------------------------------------------------

def _auth_headers(kind: str) -> Dict[str, str]:
    token = os.environ.get(f"RAGLAB_{kind.upper()}_TOKEN", "")
    return {"Authorization": f"Bearer {token}"} if token else {}


def _post_json(spec: ProviderSpec, payload: dict) -> dict:
    last_error: Exception | None = None
    for attempt in range(spec.retries + 1):
        try:
            resp = requests.post(spec.endpoint, json=payload,
                                 headers=_auth_headers(spec.kind),
                                 timeout=spec.timeout_ms / 1000.0)
            if resp.status_code >= 500:
                raise ProviderError(f"server error {resp.status_code}")
            if resp.status_code != 200:
                raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return resp.json()
        except requests.Timeout as exc:
            last_error = ProviderTimeout(f"{spec.kind} endpoint timed out: {exc}")
        except (requests.ConnectionError, ProviderError) as exc:
            last_error = exc if isinstance(exc, ProviderError) else ProviderError(str(exc))
        if attempt < spec.retries:
            time.sleep(spec.backoff_s * (2 ** attempt))
    assert last_error is not None
    if isinstance(last_error, ProviderTimeout):
        raise last_error
    raise ProviderError(f"{spec.kind} call failed after {spec.retries + 1} attempts: {last_error}")


class HttpEmbedder:
    def __init__(self, spec: ProviderSpec):
        self.spec = spec
        self.tag = spec.model_tag or spec.endpoint

    def embed(self, texts: Sequence[str]) -> List[List[float]]:
        data = _post_json(self.spec, {"model": self.spec.model_tag, "input": list(texts)})
        try:
            return [item["embedding"] for item in data["data"]]
        except (KeyError, TypeError) as exc:
            raise ProviderError(f"malformed embedding response: {exc}") from exc


class HttpGenerator:
    def __init__(self, spec: ProviderSpec):
        self.spec = spec
        self.tag = spec.model_tag or spec.endpoint

    def generate(self, prompt: str, params: GenerationParams) -> str:
        payload = {
            "model": self.spec.model_tag,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        }
        if params.stop_sequences:
            payload["stop"] = list(params.stop_sequences)
        data = _post_json(self.spec, payload)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed generation response: {exc}") from exc


class HttpReranker:
    def __init__(self, spec: ProviderSpec):
        self.spec = spec
        self.tag = spec.model_tag or spec.endpoint

    def score(self, query: str, passages: Sequence[str]) -> List[float]:
        payload = {"model": self.spec.model_tag, "query": query,
                   "documents": list(passages)}
        data = _post_json(self.spec, payload)
        try:
            scores = [0.0] * len(passages)
            for item in data["results"]:
                scores[item["index"]] = float(item["relevance_score"])
            return scores
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed rerank response: {exc}") from exc


# --- response cache ------------------------------------------------------------------

class _Cache:
    def __init__(self, cache_dir: str | Path):
        self.root = Path(cache_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    @staticmethod
    def key(kind: str, model_tag: str, payload) -> str:
        blob = json.dumps({"kind": kind, "model_tag": model_tag, "payload": payload},
                          sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def get(self, key: str):
        path = self._path(key)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))["response"]
        except (json.JSONDecodeError, KeyError, OSError):
            return None  # corrupt entry: treated as a miss, rewritten on put

    def put(self, key: str, response) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"response": response}, ensure_ascii=False,
                                  sort_keys=True), encoding="utf-8")
        tmp.replace(path)


class CachedEmbedder:
    def __init__(self, inner, cache_dir: str | Path):
        self.inner = inner
        self.tag = getattr(inner, "tag", "unknown")
        self._cache = _Cache(cache_dir)

    def embed(self, texts: Sequence[str]) -> List[List[float]]:
        out: List[List[float] | None] = [None] * len(texts)
        missing: List[int] = []
        keys = [self._cache.key("embedding", self.tag, t) for t in texts]
        for i, key in enumerate(keys):
            hit = self._cache.get(key)
            if hit is None:
                missing.append(i)
            else:
                out[i] = hit
        if missing:
            fresh = self.inner.embed([texts[i] for i in missing])
            for i, vec in zip(missing, fresh):
                self._cache.put(keys[i], list(map(float, vec)))
                out[i] = list(map(float, vec))
        return out  # type: ignore[return-value]


class CachedGenerator:
    def __init__(self, inner, cache_dir: str | Path):
        self.inner = inner
        self.tag = getattr(inner, "tag", "unknown")
        self._cache = _Cache(cache_dir)

    def generate(self, prompt: str, params: GenerationParams) -> str:
        key = self._cache.key("generator", self.tag, {
            "prompt": prompt,
            "max_output_tokens": params.max_output_tokens,
            "temperature": params.temperature,
            "stop_sequences": list(params.stop_sequences),
        })
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        text = self.inner.generate(prompt, params)
        self._cache.put(key, text)
        return text


class CachedReranker:
    def __init__(self, inner, cache_dir: str | Path):
        self.inner = inner
        self.tag = getattr(inner, "tag", "unknown")
        self._cache = _Cache(cache_dir)

    def score(self, query: str, passages: Sequence[str]) -> List[float]:
        key = self._cache.key("reranker", self.tag,
                              {"query": query, "passages": list(passages)})
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        scores = [float(s) for s in self.inner.score(query, passages)]
        self._cache.put(key, scores)
        return scores


def cached(provider, kind: str, cache_dir: str | Path):
    """Wrap a provider of the given kind with the content-addressed cache."""
    wrapper = {"embedding": CachedEmbedder, "generator": CachedGenerator,
               "reranker": CachedReranker}.get(kind)
    if wrapper is None:
        raise ConfigError(f"unknown provider kind {kind!r}")
    return wrapper(provider, cache_dir)


# --- factory and module-level convenience ops ------------------------------------------

_MOCKS = {
    ("embedding", "trigram64"): lambda: TrigramHashEmbedder(),
    ("generator", "keyword"): lambda: KeywordMockGenerator(),
    ("generator", "echo"): lambda: type(
        "EchoGenerator", (), {
            "tag": "mock:echo",
            "generate": staticmethod(
                lambda prompt, params: _apply_stops(prompt, params.stop_sequences)),
        })(),
    ("reranker", "overlap"): lambda: OverlapMockReranker(),
}


def build_provider(spec: ProviderSpec):
    """Resolve a ProviderSpec into a concrete provider object.

    ``endpoint: "env"`` reads the URL from ``RAGLAB_<KIND>_URL`` so deployment
    targets stay out of committed run configs; auth tokens always come from
    ``RAGLAB_<KIND>_TOKEN``.
    """
    if spec.endpoint == "env":
        url = os.environ.get(f"RAGLAB_{spec.kind.upper()}_URL", "")
        if not url:
            raise ConfigError(
                f"endpoint 'env' requires RAGLAB_{spec.kind.upper()}_URL to be set")
        spec = dataclasses.replace(spec, endpoint=url)
    if spec.endpoint.startswith("mock:"):
        name = spec.endpoint.split(":", 1)[1]
        factory = _MOCKS.get((spec.kind, name))
        if factory is None:
            raise ConfigError(f"unknown mock {spec.endpoint!r} for kind {spec.kind!r}")
        return factory()
    if spec.endpoint.startswith("file:"):
        if spec.kind != "embedding":
            raise ConfigError("file providers are embedding-only")
        return FileEmbedder(spec.endpoint.split(":", 1)[1], tag=spec.model_tag or "file")
    if spec.endpoint.startswith(("http://", "https://")):
        cls = {"embedding": HttpEmbedder, "generator": HttpGenerator,
               "reranker": HttpReranker}[spec.kind]
        return cls(spec)
    raise ConfigError(f"unrecognized endpoint {spec.endpoint!r}")


def embed_texts(provider, texts: Sequence[str], max_batch: int = 32) -> List[List[float]]:
    """Batched embedding with a uniform-dimension check across batches."""
    if not texts:
        raise ValueError("embed_texts requires at least one text")
    out: List[List[float]] = []
    dim: int | None = None
    for start in range(0, len(texts), max_batch):
        batch = list(texts[start:start + max_batch])
        try:
            vectors = provider.embed(batch)
        except ProviderError as exc:
            raise ProviderError(
                f"embedding failed for inputs {start}..{start + len(batch) - 1}: {exc}") from exc
        for vec in vectors:
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise ProviderError(f"embedding dimension drift: {len(vec)} != {dim}")
            out.append(list(map(float, vec)))
    return out


def generate(provider, prompt: str, params: GenerationParams | None = None) -> str:
    if not prompt:
        raise ValueError("prompt must be non-empty")
    return provider.generate(prompt, params or GenerationParams())


def rerank_score(provider, query: str, passage: str) -> float:
    if not query or not passage:
        raise ValueError("query and passage must be non-empty")
    return float(provider.score(query, [passage])[0])
