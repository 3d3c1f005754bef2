import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raglab.errors import ConfigError
from raglab.indexes import (Candidate, build_dense_index, build_section_index,
                            build_sparse_index, l2_normalize, search_dense)
from raglab.providers import (FailingProvider, OverlapMockReranker,
                              ScriptedGenerator, TrigramHashEmbedder)
from raglab.retrieval import (IndexBundle, ProviderSet, QueryBundle,
                              RetrievalConfig, coarse_filter, pack_context,
                              reformulate_query, rerank, retrieve_fine,
                              rrf_fuse, run_pipeline)
from raglab.tokenizer import query_terms

from conftest import bm25_reference_ranking, make_chunk


class TestReformulateQuery:
    def _generator_for(self, output):
        return ScriptedGenerator({}, default=output)

    def test_mock_passthrough(self):
        gen = self._generator_for("glucose-6-phosphate dehydrogenase deficiency hemolysis")
        out = reformulate_query("A 5-year-old boy ...", gen)
        assert out == "glucose-6-phosphate dehydrogenase deficiency hemolysis"

    def test_empty_output_treated_as_failure(self):
        assert reformulate_query("q", self._generator_for("")) is None

    def test_two_lines_first_kept(self):
        gen = self._generator_for("first line query\nsecond line ignored")
        assert reformulate_query("q", gen) == "first line query"

    def test_provider_failure_degrades(self):
        assert reformulate_query("q", FailingProvider()) is None


def build_fixture(n=10, sections=("s1", "s2")):
    chunks = []
    words = ["aortic", "stenosis", "murmur", "fever", "malaria", "cough",
             "insulin", "thyroid", "valve", "sepsis"]
    for i in range(n):
        text = f"{words[i % len(words)]} {words[(i + 3) % len(words)]} detail {i}."
        chunks.append(make_chunk(f"c{i:03d}", text=text,
                                 section=sections[i % len(sections)]))
    dense = build_dense_index(chunks, TrigramHashEmbedder())
    sparse = build_sparse_index(chunks)
    section_index = build_section_index(dense, chunks)
    return chunks, dense, sparse, section_index


class TestCoarseFilter:
    def test_k_at_least_corpus_returns_all(self):
        chunks, dense, _, sections = build_fixture()
        bundle = QueryBundle(original="q", query_vectors=[dense.vectors[0]])
        assert coarse_filter(sections, bundle, 10) == set(sections.section_ids)

    def test_self_match_section_included(self):
        chunks, dense, _, sections = build_fixture()
        bundle = QueryBundle(original="q", query_vectors=[dense.vectors[2]])
        got = coarse_filter(sections, bundle, 1)
        member_of = next(sid for sid in sections.section_ids
                         if "c002" in sections.members[sid])
        assert member_of in got

    def test_two_queries_union(self):
        chunks, dense, _, sections = build_fixture()
        # brute-force oracle: best section per query by centroid dot product
        expected = set()
        vectors = [dense.vectors[0], dense.vectors[1]]
        for q in vectors:
            scores = sections.centroids @ q
            ranked = sorted(zip(sections.section_ids, scores), key=lambda t: (-t[1], t[0]))
            expected.add(ranked[0][0])
        bundle = QueryBundle(original="q", query_vectors=vectors)
        assert coarse_filter(sections, bundle, 1) == expected


class TestRrfFuse:
    def test_documented_example(self):
        fused = rrf_fuse([["A", "B", "C"], ["C", "A", "B"]], rrf_k=60)
        assert [c.chunk_id for c in fused] == ["A", "C", "B"]
        assert fused[0].score == pytest.approx(1 / 61 + 1 / 62, abs=1e-12)
        assert fused[1].score == pytest.approx(1 / 61 + 1 / 63, abs=1e-12)
        assert fused[2].score == pytest.approx(1 / 62 + 1 / 63, abs=1e-12)

    def test_identical_rankings_keep_order(self):
        fused = rrf_fuse([["x", "y"], ["x", "y"]], rrf_k=60)
        assert [c.chunk_id for c in fused] == ["x", "y"]

    def test_single_ranking_is_identity_order(self):
        fused = rrf_fuse([["m", "n", "o"]], rrf_k=60)
        assert [c.chunk_id for c in fused] == ["m", "n", "o"]

    def test_empty_input(self):
        assert rrf_fuse([], rrf_k=60) == []

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            rrf_fuse([["a", "a"]], rrf_k=60)

    @settings(max_examples=50)
    @given(st.permutations(list(range(4))))
    def test_invariant_to_list_order(self, perm):
        rankings = [["a", "b", "c"], ["c", "b", "a"], ["b", "a", "c"], ["a", "c", "b"]]
        shuffled = [rankings[i] for i in perm]
        base = [(c.chunk_id, c.score) for c in rrf_fuse(rankings, 60)]
        other = [(c.chunk_id, c.score) for c in rrf_fuse(shuffled, 60)]
        assert [cid for cid, _ in base] == [cid for cid, _ in other]
        for (_, s1), (_, s2) in zip(base, other):
            assert s1 == pytest.approx(s2, abs=1e-12)


class TestRetrieveFine:
    def test_dense_single_query_reduces_to_search_dense(self):
        chunks, dense, _, _ = build_fixture()
        q = dense.vectors[3]
        bundle = QueryBundle(original="q", query_vectors=[q],
                             query_terms=[["detail"]])
        cfg = RetrievalConfig(n_candidates=150, top_passages=6)
        out = retrieve_fine(cfg, bundle, dense)
        expected = search_dense(dense, q, 150)
        assert [(c.chunk_id, c.score) for c in out] == [(c.chunk_id, c.score)
                                                        for c in expected]

    def test_section_filter_excludes_best_chunk(self):
        chunks, dense, _, sections = build_fixture()
        q = dense.vectors[0]  # best hit is c000
        allowed = {c.chunk_id for c in chunks if c.chunk_id != "c000"}
        bundle = QueryBundle(original="q", query_vectors=[q], query_terms=[["x"]])
        out = retrieve_fine(RetrievalConfig(), bundle, dense,
                            allowed_chunk_ids=allowed)
        assert "c000" not in [c.chunk_id for c in out]

    def test_hybrid_matches_two_oracle_fusion(self):
        chunks, dense, sparse, _ = build_fixture()
        question = "malaria fever detail"
        emb = TrigramHashEmbedder()
        qvec = l2_normalize(np.asarray(emb.embed([question])[0], dtype=np.float32))
        terms = query_terms(question)
        bundle = QueryBundle(original=question, query_vectors=[qvec],
                             query_terms=[terms])
        cfg = RetrievalConfig(retrieval_mode="hybrid", n_candidates=150, rrf_k=60)
        got = [c.chunk_id for c in retrieve_fine(cfg, bundle, dense, sparse)]

        # oracle 1: exhaustive dense cosine ranking
        dense_rank = [cid for cid, _ in sorted(
            zip(dense.chunk_ids, (dense.vectors @ qvec).tolist()),
            key=lambda t: (-t[1], t[0]))]
        # oracle 2: independent BM25 formula evaluation (positive scores only)
        corpus_terms = [query_terms(c.text) for c in chunks]
        sparse_rank = bm25_reference_ranking(corpus_terms,
                                             [c.chunk_id for c in chunks], terms)
        # oracle fusion: direct reciprocal-rank sums
        scores = {}
        for ranking in (dense_rank, sparse_rank):
            for rank, cid in enumerate(ranking, start=1):
                scores[cid] = scores.get(cid, 0.0) + 1.0 / (60 + rank)
        expected = [cid for cid, _ in sorted(scores.items(), key=lambda t: (-t[1], t[0]))]
        assert got == expected

    def test_hybrid_without_sparse_index_is_config_error(self):
        chunks, dense, _, _ = build_fixture()
        bundle = QueryBundle(original="q", query_vectors=[dense.vectors[0]],
                             query_terms=[["x"]])
        with pytest.raises(ConfigError):
            retrieve_fine(RetrievalConfig(retrieval_mode="hybrid"), bundle, dense)

    def test_output_capped_at_n_candidates(self):
        chunks, dense, _, _ = build_fixture()
        bundle = QueryBundle(original="q", query_vectors=[dense.vectors[0]],
                             query_terms=[["x"]])
        out = retrieve_fine(RetrievalConfig(n_candidates=4, top_passages=2),
                            bundle, dense)
        assert len(out) == 4


class TestRerank:
    def test_overlap_oracle_ranks_matching_chunk_first(self):
        texts = {"c1": "aortic stenosis murmur detail",
                 "c2": "thyroid gland detail",
                 "c3": "aortic valve"}
        candidates = [Candidate("c1", 0.1, 1), Candidate("c2", 0.09, 2),
                      Candidate("c3", 0.08, 3)]
        out = rerank(OverlapMockReranker(), "aortic stenosis murmur", candidates, texts)
        assert out[0].chunk_id == "c1"
        assert out[0].score == 3.0

    def test_single_candidate_unchanged(self):
        out = rerank(OverlapMockReranker(), "q", [Candidate("only", 0.5, 1)],
                     {"only": "text"})
        assert [c.chunk_id for c in out] == ["only"]

    def test_equal_scores_tie_by_chunk_id(self):
        texts = {"b": "same text", "a": "same text"}
        candidates = [Candidate("b", 0.2, 1), Candidate("a", 0.1, 2)]
        out = rerank(OverlapMockReranker(), "same", candidates, texts)
        assert [c.chunk_id for c in out] == ["a", "b"]

    def test_provider_failure_falls_back_whole(self):
        candidates = [Candidate("b", 0.2, 1), Candidate("a", 0.1, 2)]
        out = rerank(FailingProvider(), "q", candidates, {"a": "x", "b": "y"})
        assert [c.chunk_id for c in out] == ["b", "a"]


class TestPackContext:
    def _chunks(self, sizes):
        return {f"c{i}": make_chunk(f"c{i}", n_tokens=n) for i, n in enumerate(sizes)}

    def _ranked(self, n):
        return [Candidate(f"c{i}", 1.0 - i * 0.01, i + 1) for i in range(n)]

    def test_skip_and_continue(self):
        chunks = self._chunks([500, 500, 300])
        ctx = pack_context(self._ranked(3), chunks, top_passages=6, token_budget=1200)
        assert ctx.chunk_ids == ["c0", "c1"]
        assert ctx.total_tokens == 1000

    def test_single_small_passage(self):
        ctx = pack_context(self._ranked(1), self._chunks([100]), 6, 1200)
        assert ctx.total_tokens == 100

    def test_oversized_first_skipped_second_included(self):
        ctx = pack_context(self._ranked(2), self._chunks([1300, 200]), 6, 1200)
        assert ctx.chunk_ids == ["c1"]
        assert ctx.total_tokens == 200

    def test_empty_input(self):
        ctx = pack_context([], {}, 6, 1200)
        assert ctx.passages == [] and ctx.total_tokens == 0

    def test_top_passages_limit(self):
        ctx = pack_context(self._ranked(10), self._chunks([10] * 10), 3, 1200)
        assert len(ctx.passages) == 3

    @settings(max_examples=80)
    @given(sizes=st.lists(st.integers(1, 700), min_size=0, max_size=12),
           budget=st.integers(1, 1500), top=st.integers(1, 8))
    def test_budget_and_count_never_exceeded(self, sizes, budget, top):
        ctx = pack_context(self._ranked(len(sizes)), self._chunks(sizes), top, budget)
        assert ctx.total_tokens <= budget
        assert len(ctx.passages) <= top


class TestRunPipeline:
    def _bundle(self):
        chunks, dense, sparse, sections = build_fixture()
        return IndexBundle(dense=dense, chunks={c.chunk_id: c for c in chunks},
                           sparse=sparse, sections=sections)

    def _providers(self, generator=None):
        return ProviderSet(embedder=TrigramHashEmbedder(), generator=generator,
                           reranker=OverlapMockReranker())

    def test_minimal_path_equals_dense_top_hits(self):
        indexes = self._bundle()
        cfg = RetrievalConfig()
        question = "aortic stenosis murmur"
        context, trace = run_pipeline(question, cfg, indexes, self._providers())
        emb = TrigramHashEmbedder()
        qvec = l2_normalize(np.asarray(emb.embed([question])[0], dtype=np.float32))
        expected = [c.chunk_id for c in search_dense(indexes.dense, qvec, 150)]
        packed = pack_context(search_dense(indexes.dense, qvec, 150), indexes.chunks,
                              cfg.top_passages, cfg.context_token_budget)
        assert context.chunk_ids == packed.chunk_ids
        assert trace.reranked is None and trace.coarse_sections is None
        assert [c.chunk_id for c in trace.fine] == expected

    def test_all_on_trace_deterministic(self):
        cfg = RetrievalConfig(retrieval_mode="hybrid", coarse="on", k_sections=1,
                              reranker="on", reformulation="on")
        gen = ScriptedGenerator({}, default="malaria fever")
        outs = []
        for _ in range(2):
            context, trace = run_pipeline("cyclic fever after travel", cfg,
                                          self._bundle(), self._providers(gen))
            outs.append(json.dumps(trace.as_dict(include_timings=False), sort_keys=True))
        assert outs[0] == outs[1]
        assert '"reformulated": "malaria fever"' in outs[0]

    def test_reformulation_provider_down_degrades(self):
        cfg = RetrievalConfig(reformulation="on")
        context, trace = run_pipeline("fever question", cfg, self._bundle(),
                                      self._providers(FailingProvider()))
        assert trace.reformulated is None
        assert context.passages  # pipeline still completed

    def test_stage_presence_matches_config(self):
        cfg = RetrievalConfig(coarse="on", k_sections=1, reranker="on")
        _, trace = run_pipeline("thyroid", cfg, self._bundle(),
                                self._providers(ScriptedGenerator({}, default="x")))
        assert trace.coarse_sections is not None
        assert trace.reranked is not None
        assert set(trace.timings_ms) == {"embed_queries", "coarse_filter",
                                         "retrieve_fine", "rerank", "pack_context"}

    def test_funnel_monotonicity(self):
        cfg = RetrievalConfig(retrieval_mode="hybrid", coarse="on", k_sections=1,
                              reranker="on", reformulation="on")
        indexes = self._bundle()
        gen = ScriptedGenerator({}, default="valve murmur")
        context, trace = run_pipeline("aortic valve disease", cfg, indexes,
                                      self._providers(gen))
        pool = set()
        for sid in trace.coarse_sections:
            pool.update(indexes.sections.members[sid])
        assert len(pool) >= len(trace.fine) >= len(trace.reranked) >= len(context.passages)

    def test_misconfiguration_fails_before_inference(self):
        indexes = self._bundle()
        indexes.sparse = None
        with pytest.raises(ConfigError):
            run_pipeline("q", RetrievalConfig(retrieval_mode="hybrid"), indexes,
                         self._providers())

    def test_reranker_off_single_query_keeps_fine_order(self):
        cfg = RetrievalConfig()
        context, trace = run_pipeline("insulin therapy", cfg, self._bundle(),
                                      self._providers())
        fine_ids = [c.chunk_id for c in trace.fine]
        assert context.chunk_ids == fine_ids[: len(context.chunk_ids)]
