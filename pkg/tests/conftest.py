import math
import random

import pytest

from raglab.ingest import ChunkRecord, ChunkingParams, Section


def bm25_reference_score(corpus_terms, doc_idx, query, k1=1.5, b=0.75, epsilon=0.25):
    """Independent BM25 evaluation straight from the formula, for oracle checks."""
    n_docs = len(corpus_terms)
    doc_lengths = [len(d) for d in corpus_terms]
    avgdl = sum(doc_lengths) / n_docs
    vocabulary = {t for d in corpus_terms for t in d}
    raw_idf = {}
    for t in vocabulary:
        df = sum(1 for d in corpus_terms if t in d)
        raw_idf[t] = math.log((n_docs - df + 0.5) / (df + 0.5))
    positives = [v for v in raw_idf.values() if v > 0]
    if positives:
        floor = epsilon * sum(positives) / len(positives)
    else:
        floor = epsilon * sum(abs(v) for v in raw_idf.values()) / len(raw_idf)
    idf = {t: (v if v > 0 else floor) for t, v in raw_idf.items()}
    score = 0.0
    doc = corpus_terms[doc_idx]
    for t in query:
        if t not in idf:
            continue
        tf = doc.count(t)
        if tf == 0:
            continue
        score += idf[t] * tf * (k1 + 1) / (tf + k1 * (1 - b + b * doc_lengths[doc_idx] / avgdl))
    return score


def bm25_reference_ranking(corpus_terms, chunk_ids, query, **kw):
    """Positive-score docs ranked by the reference formula, ties by chunk id."""
    scored = []
    for i, cid in enumerate(chunk_ids):
        s = bm25_reference_score(corpus_terms, i, query, **kw)
        if s != 0.0:
            scored.append((cid, s))
    return [cid for cid, _ in sorted(scored, key=lambda t: (-t[1], t[0]))]


def make_sentence(n_tokens: int, rng: random.Random, word_pool=None) -> str:
    """A capitalized sentence with exactly n_tokens default-rule tokens.

    Layout: (n_tokens - 2) lowercase words + 'end' + '.'  (n_tokens >= 2).
    """
    assert n_tokens >= 2
    pool = word_pool or ["alpha", "beta", "gamma", "delta", "omega", "sigma"]
    words = [rng.choice(pool) for _ in range(n_tokens - 2)]
    words.append("end")
    sentence = " ".join(words) + "."
    return sentence[0].upper() + sentence[1:]


def section_from_sentence_lengths(lengths, rng=None, section_id="book/ch/sec"):
    rng = rng or random.Random(0)
    book, chapter, sec = section_id.split("/")
    paragraphs = [make_sentence(n, rng) for n in lengths]
    return Section(book_name=book, chapter_title=chapter, section_title=sec,
                   paragraphs=paragraphs, section_id=section_id)


def make_chunk(chunk_id: str, text: str = "filler text.", n_tokens: int | None = None,
               book="b", chapter="c", section="s") -> ChunkRecord:
    from raglab.tokenizer import count_tokens
    return ChunkRecord(chunk_id=chunk_id, text=text, book=book, chapter=chapter,
                       section=section,
                       n_tokens=count_tokens(text) if n_tokens is None else n_tokens)


@pytest.fixture
def params():
    return ChunkingParams(max_tokens=512, min_paragraph_tokens=20, min_chunk_tokens=30)


@pytest.fixture
def demo_dir(tmp_path):
    """Materialized demo workspace (corpus, questions, run.json)."""
    from raglab import data as packaged
    import shutil

    target = tmp_path / "demo"
    (target / "corpus").mkdir(parents=True)
    for book in sorted(packaged.demo_corpus_dir().glob("*.txt")):
        shutil.copy(book, target / "corpus" / book.name)
    shutil.copy(packaged.demo_dataset_path(), target / "questions.jsonl")
    shutil.copy(packaged.demo_config_path(), target / "run.json")
    return target
