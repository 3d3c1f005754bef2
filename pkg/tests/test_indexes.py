import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raglab.errors import IndexFormatError
from raglab.indexes import (build_dense_index, build_section_index,
                            build_sparse_index, l2_normalize, load_dense_index,
                            load_section_index, load_sparse_index,
                            save_dense_index, save_section_index,
                            save_sparse_index, search_dense, search_sparse)
from raglab.providers import TrigramHashEmbedder
from raglab.tokenizer import query_terms

from conftest import bm25_reference_score, make_chunk


class TestNormalize:
    def test_three_four_five(self):
        out = l2_normalize(np.array([3.0, 4.0]))
        assert np.allclose(out, [0.6, 0.8], atol=1e-6)

    def test_unit_vector_unchanged(self):
        v = np.array([1.0, 0.0, 0.0])
        assert np.allclose(l2_normalize(v), v, atol=1e-6)

    def test_zero_vector_errors(self):
        with pytest.raises(ValueError):
            l2_normalize(np.zeros(4))


def corpus_of(texts, prefix="c"):
    return [make_chunk(f"{prefix}{i:03d}", text=t) for i, t in enumerate(texts)]


class TestDenseIndex:
    def test_shape_and_unit_rows(self):
        chunks = corpus_of(["alpha beta.", "gamma delta.", "epsilon zeta."])
        index = build_dense_index(chunks, TrigramHashEmbedder())
        assert index.vectors.shape == (3, 64)
        assert np.allclose(np.linalg.norm(index.vectors, axis=1), 1.0, atol=1e-4)
        assert index.chunk_ids == [c.chunk_id for c in chunks]
        assert index.embedder_tag == "mock:trigram64"

    def test_empty_chunks_error(self):
        with pytest.raises(ValueError):
            build_dense_index([], TrigramHashEmbedder())

    def test_self_match_rank_one(self):
        chunks = corpus_of(["first text here.", "second text there.", "third words."])
        index = build_dense_index(chunks, TrigramHashEmbedder())
        hits = search_dense(index, index.vectors[1], k=3)
        assert hits[0].chunk_id == "c001"
        assert hits[0].score == pytest.approx(1.0, abs=1e-6)

    def test_k_clamped_to_corpus(self):
        chunks = corpus_of(["one.", "two.", "three."])
        index = build_dense_index(chunks, TrigramHashEmbedder())
        assert len(search_dense(index, index.vectors[0], k=8)) == 3

    def test_dimension_mismatch_errors(self):
        index = build_dense_index(corpus_of(["abc."]), TrigramHashEmbedder())
        with pytest.raises(ValueError):
            search_dense(index, np.ones(3, dtype=np.float32), k=1)

    def test_matches_exhaustive_cosine_oracle(self):
        rng = np.random.default_rng(42)
        vectors = rng.normal(size=(50, 16)).astype(np.float32)
        chunks = corpus_of([f"text {i}." for i in range(50)])

        class FixedEmbedder:
            tag = "fixed"

            def embed(self, texts):
                start = int(texts[0].split()[1].rstrip("."))
                return [vectors[start + j].tolist() for j in range(len(texts))]

        index = build_dense_index(chunks, FixedEmbedder(), max_batch=50)
        for probe in range(5):
            q = l2_normalize(rng.normal(size=16).astype(np.float32))
            # oracle: exhaustive cosine ranking, same tie rule
            unit = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
            sims = unit @ q
            expected = [cid for cid, _ in sorted(
                zip(index.chunk_ids, sims.tolist()), key=lambda t: (-t[1], t[0]))][:3]
            got = [c.chunk_id for c in search_dense(index, q, k=3)]
            assert got == expected

    def test_ranks_contiguous_and_scores_non_increasing(self):
        chunks = corpus_of([f"word number {i}." for i in range(10)])
        index = build_dense_index(chunks, TrigramHashEmbedder())
        hits = search_dense(index, index.vectors[4], k=10)
        assert [h.rank for h in hits] == list(range(1, 11))
        assert all(hits[i].score >= hits[i + 1].score for i in range(len(hits) - 1))


class TestSparseIndex:
    def test_single_doc_idf_floored_positive(self):
        index = build_sparse_index(corpus_of(["alpha beta"]))
        raw = math.log(0.5 / 1.5)
        assert raw < 0
        assert all(v > 0 for v in index.idf.values())

    def test_absent_term_scores_nothing(self):
        index = build_sparse_index(corpus_of(["alpha beta", "gamma delta"]))
        assert search_sparse(index, ["missing"], k=5) == []

    def test_rare_term_has_higher_idf(self):
        index = build_sparse_index(corpus_of(["a b", "a c", "d"]))
        assert index.idf["d"] > index.idf["a"]

    def test_hand_evaluated_ranking(self):
        texts = ["x x x", "x", "y"]
        index = build_sparse_index(corpus_of(texts))
        corpus_terms = [query_terms(t) for t in texts]
        hits = search_sparse(index, ["x"], k=3)
        assert [h.chunk_id for h in hits] == ["c000", "c001"]
        for hit, idx in zip(hits, (0, 1)):
            assert hit.score == pytest.approx(
                bm25_reference_score(corpus_terms, idx, ["x"]), abs=1e-12)

    def test_duplicate_docs_tie_broken_by_chunk_id(self):
        index = build_sparse_index(corpus_of(["same words here", "same words here"]))
        hits = search_sparse(index, ["same"], k=2)
        assert [h.chunk_id for h in hits] == ["c000", "c001"]
        assert hits[0].score == hits[1].score

    def test_consistent_with_default_tokenizer_lengths(self):
        chunks = corpus_of(["Alpha, beta gamma!", "delta."])
        index = build_sparse_index(chunks)
        assert index.doc_lengths == [chunks[0].n_tokens, chunks[1].n_tokens]
        assert index.avgdl == sum(index.doc_lengths) / 2
        assert index.N == 2

    @settings(max_examples=60)
    @given(tf_small=st.integers(1, 6), extra=st.integers(1, 6))
    def test_score_monotone_in_tf_for_fixed_length(self, tf_small, extra):
        # two docs, same length, different target-term frequency
        length = tf_small + extra + 4
        doc_low = ["t"] * tf_small + ["z"] * (length - tf_small)
        doc_high = ["t"] * (tf_small + extra) + ["z"] * (length - tf_small - extra)
        chunks = corpus_of([" ".join(doc_low), " ".join(doc_high), "q r s"])
        index = build_sparse_index(chunks)
        hits = {h.chunk_id: h.score for h in search_sparse(index, ["t"], k=3)}
        assert hits["c001"] >= hits["c000"]

    @settings(max_examples=60)
    @given(tf=st.integers(1, 5), pad=st.integers(1, 30))
    def test_score_monotone_in_doc_length_for_fixed_tf(self, tf, pad):
        short = ["t"] * tf + ["z"] * 2
        long = ["t"] * tf + ["z"] * (2 + pad)
        chunks = corpus_of([" ".join(short), " ".join(long), "q r s"])
        index = build_sparse_index(chunks)
        hits = {h.chunk_id: h.score for h in search_sparse(index, ["t"], k=3)}
        assert hits["c000"] >= hits["c001"]


class TestSectionIndex:
    def _chunks_with_sections(self):
        chunks = []
        for s, sec in enumerate(("s1", "s2", "s3")):
            for j in range(2):
                chunks.append(make_chunk(f"{sec}:{j}", text=f"text {s} {j}.", section=sec))
        return chunks

    def test_single_chunk_centroid_equals_vector(self):
        chunks = [make_chunk("only:0", text="lone chunk text.")]
        dense = build_dense_index(chunks, TrigramHashEmbedder())
        sections = build_section_index(dense, chunks)
        assert np.allclose(sections.centroids[0], dense.vectors[0], atol=1e-6)

    def test_opposite_vectors_error(self):
        chunks = [make_chunk("s:0"), make_chunk("s:1")]

        class OpposingEmbedder:
            tag = "opposing"
            _n = 0

            def embed(self, texts):
                out = []
                for _ in texts:
                    sign = 1.0 if self._n % 2 == 0 else -1.0
                    self._n += 1
                    out.append([sign, 0.0])
                return out

        dense = build_dense_index(chunks, OpposingEmbedder())
        with pytest.raises(ValueError, match="zero centroid"):
            build_section_index(dense, chunks)

    def test_centroids_match_brute_force_means(self):
        chunks = self._chunks_with_sections()
        dense = build_dense_index(chunks, TrigramHashEmbedder())
        sections = build_section_index(dense, chunks)
        assert len(sections.section_ids) == 3
        for i, sid in enumerate(sections.section_ids):
            rows = [dense.chunk_ids.index(cid) for cid in sections.members[sid]]
            mean = dense.vectors[rows].mean(axis=0)
            mean = mean / np.linalg.norm(mean)
            assert np.allclose(sections.centroids[i], mean, atol=1e-6)

    def test_membership_partition(self):
        chunks = self._chunks_with_sections()
        dense = build_dense_index(chunks, TrigramHashEmbedder())
        sections = build_section_index(dense, chunks)
        seen = [cid for sid in sections.section_ids for cid in sections.members[sid]]
        assert sorted(seen) == sorted(c.chunk_id for c in chunks)


class TestPersistence:
    def test_dense_round_trip_identical_results(self, tmp_path):
        chunks = corpus_of([f"sentence number {i}." for i in range(12)])
        index = build_dense_index(chunks, TrigramHashEmbedder())
        save_dense_index(index, tmp_path)
        loaded = load_dense_index(tmp_path)
        assert loaded.embedder_tag == index.embedder_tag
        assert (loaded.vectors == index.vectors).all()
        rng = np.random.default_rng(3)
        for _ in range(10):
            q = l2_normalize(rng.normal(size=64).astype(np.float32))
            before = [(c.chunk_id, c.score) for c in search_dense(index, q, 5)]
            after = [(c.chunk_id, c.score) for c in search_dense(loaded, q, 5)]
            assert before == after

    def test_wrong_magic_errors(self, tmp_path):
        (tmp_path / "dense.vec").write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
        with pytest.raises(IndexFormatError, match="magic"):
            load_dense_index(tmp_path)

    def test_truncated_file_errors(self, tmp_path):
        chunks = corpus_of(["alpha.", "beta."])
        index = build_dense_index(chunks, TrigramHashEmbedder())
        save_dense_index(index, tmp_path)
        data = (tmp_path / "dense.vec").read_bytes()
        (tmp_path / "dense.vec").write_bytes(data[:-8])
        with pytest.raises(IndexFormatError, match="truncated"):
            load_dense_index(tmp_path)

    def test_version_mismatch_errors(self, tmp_path):
        chunks = corpus_of(["alpha.", "beta."])
        save_dense_index(build_dense_index(chunks, TrigramHashEmbedder()), tmp_path)
        data = bytearray((tmp_path / "dense.vec").read_bytes())
        data[4] = 99
        (tmp_path / "dense.vec").write_bytes(bytes(data))
        with pytest.raises(IndexFormatError, match="version"):
            load_dense_index(tmp_path)

    def test_sparse_round_trip_identical_scores(self, tmp_path):
        texts = ["alpha beta gamma", "beta beta delta", "gamma gamma gamma epsilon"]
        index = build_sparse_index(corpus_of(texts))
        save_sparse_index(index, tmp_path / "sparse.json")
        loaded = load_sparse_index(tmp_path / "sparse.json")
        for q in (["beta"], ["gamma", "alpha"], ["delta", "delta"]):
            before = [(c.chunk_id, c.score) for c in search_sparse(index, q, 3)]
            after = [(c.chunk_id, c.score) for c in search_sparse(loaded, q, 3)]
            assert before == after

    def test_section_round_trip(self, tmp_path):
        chunks = [make_chunk(f"s{i}:{j}", text=f"text {i} {j}.", section=f"s{i}")
                  for i in range(2) for j in range(2)]
        dense = build_dense_index(chunks, TrigramHashEmbedder())
        sections = build_section_index(dense, chunks)
        save_section_index(sections, tmp_path)
        loaded = load_section_index(tmp_path)
        assert loaded.section_ids == sections.section_ids
        assert loaded.members == sections.members
        assert (loaded.centroids == sections.centroids).all()

    def test_two_builds_byte_identical(self, tmp_path):
        chunks = corpus_of([f"deterministic text {i}." for i in range(5)])
        for d in ("a", "b"):
            index = build_dense_index(chunks, TrigramHashEmbedder())
            save_dense_index(index, tmp_path / d)
            save_sparse_index(build_sparse_index(chunks), tmp_path / d / "sparse.json")
        for name in ("dense.vec", "dense.ids.jsonl", "dense.meta.json", "sparse.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
