"""Three-stage retrieval: coarse section filter, fine retrieval, reranking.

A question flows through: optional query reformulation (the rewrite is issued
as an additional query, never a replacement), query embedding, optional
coarse restriction to the top-k sections by centroid similarity, dense or
hybrid (dense + BM25 fused by reciprocal rank) candidate retrieval, optional
cross-encoder reranking of the candidate pool, and finally token-budgeted
packing of the top passages. Every stage is recorded in a trace with its
wall time so runtime accounting survives to the reports.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import ConfigError, ProviderError
from .indexes import (Candidate, DenseIndex, SectionIndex, SparseIndex,
                      l2_normalize, search_dense, search_sparse, top_sections)
from .ingest import ChunkRecord
from .providers import GenerationParams
from .tokenizer import query_terms

log = logging.getLogger(__name__)

REFORMULATION_TEMPLATE = (
    "Rewrite the clinical vignette below as one concise textbook-style medical "
    "search query. Remove non-essential patient details; keep the clinically "
    "relevant concepts and mechanisms. Reply with the query only.\n\n"
    "Vignette: {question}"
)


@dataclass(frozen=True)
class RetrievalConfig:
    retrieval_mode: str = "dense"          # dense | hybrid
    coarse: str = "off"                    # off | on
    k_sections: int = 20
    reranker: str = "off"                  # off | on
    reformulation: str = "off"             # off | on
    n_candidates: int = 150
    top_passages: int = 6
    context_token_budget: int = 1200
    rrf_k: int = 60

    def __post_init__(self) -> None:
        if self.retrieval_mode not in ("dense", "hybrid"):
            raise ConfigError(f"retrieval_mode must be dense or hybrid, got {self.retrieval_mode!r}")
        for name in ("coarse", "reranker", "reformulation"):
            if getattr(self, name) not in ("off", "on"):
                raise ConfigError(f"{name} must be off or on")
        if self.top_passages > self.n_candidates:
            raise ConfigError("top_passages cannot exceed n_candidates")
        for name in ("k_sections", "n_candidates", "top_passages",
                     "context_token_budget", "rrf_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass
class QueryBundle:
    original: str
    reformulated: Optional[str] = None
    query_vectors: List[np.ndarray] = field(default_factory=list)
    query_terms: List[List[str]] = field(default_factory=list)

    @property
    def queries(self) -> List[str]:
        return [self.original] + ([self.reformulated] if self.reformulated else [])


@dataclass(frozen=True)
class Passage:
    chunk_id: str
    text: str
    n_tokens: int
    final_score: float


@dataclass
class EvidenceContext:
    passages: List[Passage] = field(default_factory=list)
    total_tokens: int = 0

    @property
    def chunk_ids(self) -> List[str]:
        return [p.chunk_id for p in self.passages]


@dataclass
class RetrievalTrace:
    question: str
    reformulated: Optional[str] = None
    coarse_sections: Optional[List[str]] = None
    fine: List[Candidate] = field(default_factory=list)
    reranked: Optional[List[Candidate]] = None
    packed_chunk_ids: List[str] = field(default_factory=list)
    timings_ms: Dict[str, float] = field(default_factory=dict)

    def as_dict(self, include_timings: bool = True) -> dict:
        out = {
            "question": self.question,
            "reformulated": self.reformulated,
            "coarse_sections": self.coarse_sections,
            "fine": [[c.chunk_id, c.score, c.rank] for c in self.fine],
            "reranked": (None if self.reranked is None else
                         [[c.chunk_id, c.score, c.rank] for c in self.reranked]),
            "packed_chunk_ids": self.packed_chunk_ids,
        }
        if include_timings:
            out["timings_ms"] = self.timings_ms
        return out


@dataclass
class IndexBundle:
    """Everything a pipeline run searches over, loaded once and shared."""

    dense: DenseIndex
    chunks: Mapping[str, ChunkRecord]
    sparse: Optional[SparseIndex] = None
    sections: Optional[SectionIndex] = None


@dataclass
class ProviderSet:
    embedder: object
    generator: object = None
    reranker: object = None


def reformulate_query(question: str, generator) -> Optional[str]:
    """Ask the generator for a compact retrieval query; None on any failure.

    The output is trimmed to its first non-empty line. Empty output counts as
    a failure so the pipeline degrades to the original question only.
    """
    prompt = REFORMULATION_TEMPLATE.format(question=question)
    try:
        raw = generator.generate(prompt, GenerationParams(max_output_tokens=64))
    except ProviderError as exc:
        log.warning("query reformulation failed, using original query only: %s", exc)
        return None
    first_line = raw.strip().splitlines()[0].strip() if raw.strip() else ""
    if not first_line:
        log.warning("query reformulation returned empty output; ignored")
        return None
    return first_line


def coarse_filter(sections: SectionIndex, bundle: QueryBundle,
                  k_sections: int) -> Set[str]:
    """Union over active queries of the top-k sections by centroid score."""
    if k_sections < 1:
        raise ValueError("k_sections must be >= 1")
    selected: Set[str] = set()
    for qvec in bundle.query_vectors:
        selected.update(sid for sid, _ in top_sections(sections, qvec, k_sections))
    return selected


def rrf_fuse(rankings: Sequence[Sequence[str]], rrf_k: int = 60) -> List[Candidate]:
    """Reciprocal rank fusion: score(d) = sum over lists of 1/(k + rank_d)."""
    scores: Dict[str, float] = {}
    for ranking in rankings:
        if len(set(ranking)) != len(ranking):
            raise ValueError("ranking lists must not contain duplicate ids")
        for rank, chunk_id in enumerate(ranking, start=1):
            scores[chunk_id] = scores.get(chunk_id, 0.0) + 1.0 / (rrf_k + rank)
    ordered = sorted(scores.items(), key=lambda t: (-t[1], t[0]))
    return [Candidate(cid, s, rank) for rank, (cid, s) in enumerate(ordered, start=1)]


def _filtered(cands: List[Candidate], allowed: Optional[Set[str]]) -> List[Candidate]:
    if allowed is None:
        return cands
    kept = [c for c in cands if c.chunk_id in allowed]
    return [Candidate(c.chunk_id, c.score, rank) for rank, c in enumerate(kept, start=1)]


def retrieve_fine(cfg: RetrievalConfig, bundle: QueryBundle, dense: DenseIndex,
                  sparse: Optional[SparseIndex] = None,
                  allowed_chunk_ids: Optional[Set[str]] = None) -> List[Candidate]:
    """Per-query dense (and, in hybrid mode, BM25) rankings fused with RRF.

    The section filter restricts the searchable set before ranking, and the
    candidate cap applies per query and again after fusion. With a single
    ranking list (dense mode, no reformulation) the list passes through
    unchanged, raw scores included.
    """
    if cfg.retrieval_mode == "hybrid" and sparse is None:
        raise ConfigError("hybrid retrieval requires a sparse index")

    per_query_k = len(dense.chunk_ids)  # rank everything, filter, then cap
    rankings: List[List[Candidate]] = []
    for i, qvec in enumerate(bundle.query_vectors):
        dense_hits = _filtered(search_dense(dense, qvec, per_query_k),
                               allowed_chunk_ids)[: cfg.n_candidates]
        rankings.append(dense_hits)
        if cfg.retrieval_mode == "hybrid":
            sparse_hits = _filtered(search_sparse(sparse, bundle.query_terms[i], per_query_k),
                                    allowed_chunk_ids)[: cfg.n_candidates]
            rankings.append(sparse_hits)

    if len(rankings) == 1:
        return rankings[0][: cfg.n_candidates]
    fused = rrf_fuse([[c.chunk_id for c in r] for r in rankings], cfg.rrf_k)
    return fused[: cfg.n_candidates]


def rerank(reranker, question: str, candidates: List[Candidate],
           chunk_texts: Mapping[str, str]) -> List[Candidate]:
    """Rescore every (question, chunk) pair; falls back to input order whole.

    The provider scores the original question against each candidate's text.
    Any provider failure leaves the input ordering untouched (logged) rather
    than producing a partially reranked list.
    """
    if not candidates:
        raise ValueError("rerank requires a non-empty candidate list")
    try:
        scores = reranker.score(question, [chunk_texts[c.chunk_id] for c in candidates])
    except ProviderError as exc:
        log.warning("reranker unavailable, keeping retrieval order: %s", exc)
        return list(candidates)
    if len(scores) != len(candidates):
        log.warning("reranker returned %d scores for %d candidates; keeping retrieval order",
                    len(scores), len(candidates))
        return list(candidates)
    paired = sorted(zip(candidates, scores), key=lambda t: (-t[1], t[0].chunk_id))
    return [Candidate(c.chunk_id, float(s), rank)
            for rank, (c, s) in enumerate(paired, start=1)]


def pack_context(ranked: Sequence[Candidate], chunks: Mapping[str, ChunkRecord],
                 top_passages: int, token_budget: int) -> EvidenceContext:
    """Greedy skip-and-continue packing under the token budget.

    Candidates are visited in rank order; a passage is included only if it
    fits the remaining budget, otherwise it is skipped and the walk continues
    until ``top_passages`` passages are packed or the list ends.
    """
    ctx = EvidenceContext()
    for cand in ranked:
        if len(ctx.passages) >= top_passages:
            break
        record = chunks[cand.chunk_id]
        if ctx.total_tokens + record.n_tokens > token_budget:
            continue
        ctx.passages.append(Passage(record.chunk_id, record.text,
                                    record.n_tokens, cand.score))
        ctx.total_tokens += record.n_tokens
    return ctx


def run_pipeline(question: str, cfg: RetrievalConfig, indexes: IndexBundle,
                 providers: ProviderSet) -> Tuple[EvidenceContext, RetrievalTrace]:
    """Execute reformulate? -> embed -> coarse? -> fine -> rerank? -> pack."""
    if cfg.retrieval_mode == "hybrid" and indexes.sparse is None:
        raise ConfigError("config asks for hybrid retrieval but no sparse index is loaded")
    if cfg.coarse == "on" and indexes.sections is None:
        raise ConfigError("config asks for coarse filtering but no section index is loaded")
    if cfg.reranker == "on" and providers.reranker is None:
        raise ConfigError("config asks for reranking but no reranker provider is set")
    if cfg.reformulation == "on" and providers.generator is None:
        raise ConfigError("config asks for reformulation but no generator provider is set")

    trace = RetrievalTrace(question=question)
    bundle = QueryBundle(original=question)

    if cfg.reformulation == "on":
        t0 = time.perf_counter()
        bundle.reformulated = reformulate_query(question, providers.generator)
        trace.timings_ms["reformulate"] = (time.perf_counter() - t0) * 1000.0
        trace.reformulated = bundle.reformulated

    t0 = time.perf_counter()
    vectors = providers.embedder.embed(bundle.queries)
    bundle.query_vectors = [l2_normalize(np.asarray(v, dtype=np.float32)) for v in vectors]
    bundle.query_terms = [query_terms(q) for q in bundle.queries]
    trace.timings_ms["embed_queries"] = (time.perf_counter() - t0) * 1000.0

    allowed_chunk_ids: Optional[Set[str]] = None
    if cfg.coarse == "on":
        t0 = time.perf_counter()
        section_ids = coarse_filter(indexes.sections, bundle, cfg.k_sections)
        allowed_chunk_ids = set()
        for sid in section_ids:
            allowed_chunk_ids.update(indexes.sections.members[sid])
        trace.coarse_sections = sorted(section_ids)
        trace.timings_ms["coarse_filter"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    fine = retrieve_fine(cfg, bundle, indexes.dense, indexes.sparse, allowed_chunk_ids)
    trace.fine = fine
    trace.timings_ms["retrieve_fine"] = (time.perf_counter() - t0) * 1000.0

    final = fine
    if cfg.reranker == "on" and fine:
        t0 = time.perf_counter()
        chunk_texts = {c.chunk_id: indexes.chunks[c.chunk_id].text for c in fine}
        final = rerank(providers.reranker, question, fine, chunk_texts)
        trace.reranked = final
        trace.timings_ms["rerank"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    context = pack_context(final, indexes.chunks, cfg.top_passages,
                           cfg.context_token_budget)
    trace.packed_chunk_ids = context.chunk_ids
    trace.timings_ms["pack_context"] = (time.perf_counter() - t0) * 1000.0
    return context, trace
