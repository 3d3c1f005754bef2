"""Dense, sparse (BM25), and section-centroid indexes over a chunk corpus.

All three are exact, in-memory structures sized for deterministic evaluation:
dense search is flat inner-product over unit-norm float32 rows (cosine), the
sparse index is Okapi BM25 with an epsilon floor on negative IDFs, and the
section index holds one renormalized centroid per (book, chapter, section)
group for coarse filtering. Ties everywhere break by ascending chunk_id so
results are reproducible bit-for-bit.

Persistence: vector blocks are little-endian float32, row-major, behind a
(magic, version, dim, count) header; sparse and section metadata are
versioned JSON. Round trips are exact.
"""

from __future__ import annotations

import json
import math
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import IndexFormatError, ProviderError
from .ingest import ChunkRecord
from .tokenizer import query_terms

FORMAT_VERSION = 1
_DENSE_MAGIC = b"RGDX"
_SECTION_MAGIC = b"RGSX"


@dataclass(frozen=True)
class Candidate:
    """One retrieval hit: ranks are 1-based, scores non-increasing in rank."""

    chunk_id: str
    score: float
    rank: int


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit L2 norm; zero vectors are an error."""
    arr = np.asarray(v, dtype=np.float32)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return arr / norm


def _ranked(scored: Iterable[Tuple[str, float]], k: int) -> List[Candidate]:
    ordered = sorted(scored, key=lambda t: (-t[1], t[0]))[:k]
    return [Candidate(cid, float(s), rank) for rank, (cid, s) in enumerate(ordered, start=1)]


# --- dense index ---------------------------------------------------------------

@dataclass
class DenseIndex:
    dim: int
    vectors: np.ndarray          # (N, dim) float32, unit-norm rows
    chunk_ids: List[str]
    embedder_tag: str


def build_dense_index(chunks: Sequence[ChunkRecord], embedder,
                      max_batch: int = 32) -> DenseIndex:
    """Embed every chunk (in batches) and stack normalized rows.

    The embedder must return one fixed-dimension vector per input text;
    a dimension drift across batches or a provider failure aborts the build
    with the offending chunk range in the message.
    """
    if not chunks:
        raise ValueError("cannot build a dense index from zero chunks")
    ids = [c.chunk_id for c in chunks]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate chunk_ids in corpus")

    rows: List[np.ndarray] = []
    dim: int | None = None
    for start in range(0, len(chunks), max_batch):
        batch = chunks[start:start + max_batch]
        try:
            vectors = embedder.embed([c.text for c in batch])
        except ProviderError as exc:
            raise ProviderError(
                f"embedding failed for chunks {batch[0].chunk_id}..{batch[-1].chunk_id}: {exc}"
            ) from exc
        for chunk, vec in zip(batch, vectors):
            arr = np.asarray(vec, dtype=np.float32)
            if dim is None:
                dim = int(arr.shape[0])
            elif arr.shape[0] != dim:
                raise ProviderError(
                    f"embedding dimension drift at {chunk.chunk_id}: {arr.shape[0]} != {dim}")
            rows.append(l2_normalize(arr))
    matrix = np.vstack(rows).astype(np.float32)
    return DenseIndex(dim=int(dim), vectors=matrix, chunk_ids=ids,
                      embedder_tag=getattr(embedder, "tag", "unknown"))


def search_dense(index: DenseIndex, query: np.ndarray, k: int) -> List[Candidate]:
    """Top-k rows by inner product (cosine on unit vectors)."""
    q = np.asarray(query, dtype=np.float32)
    if q.shape != (index.dim,):
        raise ValueError(f"query dim {q.shape} does not match index dim {index.dim}")
    scores = index.vectors @ q
    return _ranked(zip(index.chunk_ids, scores.tolist()), k)


# --- sparse (BM25 Okapi) index ---------------------------------------------------

@dataclass
class SparseIndex:
    postings: Dict[str, List[Tuple[int, int]]]   # term -> [(chunk ordinal, tf)]
    doc_lengths: List[int]
    chunk_ids: List[str]
    k1: float = 1.5
    b: float = 0.75
    epsilon: float = 0.25
    idf: Dict[str, float] = field(default_factory=dict, repr=False)

    @property
    def N(self) -> int:
        return len(self.doc_lengths)

    @property
    def avgdl(self) -> float:
        return sum(self.doc_lengths) / len(self.doc_lengths)


def _compute_idf(postings: Dict[str, List[Tuple[int, int]]], n_docs: int,
                 epsilon: float) -> Dict[str, float]:
    # idf(t) = ln((N - df + 0.5) / (df + 0.5)); negative values floored to
    # epsilon * mean(positive idfs), falling back to epsilon * mean(|idf|)
    # when every idf is negative, so the floor is always > 0.
    raw = {t: math.log((n_docs - len(p) + 0.5) / (len(p) + 0.5)) for t, p in postings.items()}
    positives = [v for v in raw.values() if v > 0]
    if positives:
        floor = epsilon * (sum(positives) / len(positives))
    elif raw:
        floor = epsilon * (sum(abs(v) for v in raw.values()) / len(raw))
    else:
        floor = epsilon
    return {t: (v if v > 0 else floor) for t, v in raw.items()}


def build_sparse_index(chunks: Sequence[ChunkRecord], k1: float = 1.5,
                       b: float = 0.75, epsilon: float = 0.25) -> SparseIndex:
    """Inverted index with Okapi BM25 statistics over lowercased terms."""
    if not chunks:
        raise ValueError("cannot build a sparse index from zero chunks")
    postings: Dict[str, List[Tuple[int, int]]] = defaultdict(list)
    doc_lengths: List[int] = []
    for ordinal, chunk in enumerate(chunks):
        terms = query_terms(chunk.text)
        doc_lengths.append(len(terms))
        for term, tf in sorted(Counter(terms).items()):
            postings[term].append((ordinal, tf))
    index = SparseIndex(postings=dict(postings), doc_lengths=doc_lengths,
                        chunk_ids=[c.chunk_id for c in chunks],
                        k1=k1, b=b, epsilon=epsilon)
    index.idf = _compute_idf(index.postings, index.N, epsilon)
    return index


def search_sparse(index: SparseIndex, terms: Sequence[str], k: int) -> List[Candidate]:
    """Top-k chunks by BM25 score; zero-score documents are excluded.

    score(d, q) = sum over query terms t of
        idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl))
    Repeated query terms contribute once per occurrence.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    avgdl = index.avgdl
    scores: Dict[int, float] = defaultdict(float)
    for term in terms:
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf[term]
        for ordinal, tf in plist:
            denom = tf + index.k1 * (1.0 - index.b + index.b * index.doc_lengths[ordinal] / avgdl)
            scores[ordinal] += idf * tf * (index.k1 + 1.0) / denom
    nonzero = ((index.chunk_ids[o], s) for o, s in scores.items() if s != 0.0)
    return _ranked(nonzero, k)


# --- section-centroid index ------------------------------------------------------

@dataclass
class SectionIndex:
    section_ids: List[str]
    centroids: np.ndarray        # (S, dim) float32, unit-norm rows
    members: Dict[str, List[str]]


def build_section_index(dense: DenseIndex, chunks: Sequence[ChunkRecord]) -> SectionIndex:
    """One unit-norm centroid per (book/chapter/section) group of chunk rows."""
    if len(chunks) != len(dense.chunk_ids):
        raise ValueError("dense index rows are not aligned with the chunk list")
    groups: Dict[str, List[int]] = {}
    for row, chunk in enumerate(chunks):
        if chunk.chunk_id != dense.chunk_ids[row]:
            raise ValueError("dense index rows are not aligned with the chunk list")
        key = f"{chunk.book}/{chunk.chapter}/{chunk.section}"
        groups.setdefault(key, []).append(row)

    section_ids = list(groups)
    centroids = np.zeros((len(section_ids), dense.dim), dtype=np.float32)
    members: Dict[str, List[str]] = {}
    for i, sec in enumerate(section_ids):
        rows = groups[sec]
        mean = dense.vectors[rows].mean(axis=0)
        if float(np.linalg.norm(mean)) == 0.0:
            raise ValueError(f"section {sec!r} has a zero centroid (opposing member vectors)")
        centroids[i] = l2_normalize(mean)
        members[sec] = [dense.chunk_ids[r] for r in rows]
    return SectionIndex(section_ids=section_ids, centroids=centroids, members=members)


def top_sections(index: SectionIndex, query: np.ndarray, k: int) -> List[Tuple[str, float]]:
    """Sections ranked by centroid inner product; ties by ascending id."""
    scores = index.centroids @ np.asarray(query, dtype=np.float32)
    ordered = sorted(zip(index.section_ids, scores.tolist()), key=lambda t: (-t[1], t[0]))
    return ordered[: max(k, 0)]


# --- persistence -------------------------------------------------------------------

def _write_vector_block(path: Path, magic: bytes, matrix: np.ndarray) -> None:
    count, dim = matrix.shape
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<III", FORMAT_VERSION, dim, count))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def _read_vector_block(path: Path, magic: bytes) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != magic:
        raise IndexFormatError(f"{path}: bad magic bytes (not a vector block)")
    version, dim, count = struct.unpack("<III", data[4:16])
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    expected = 16 + 4 * dim * count
    if len(data) != expected:
        raise IndexFormatError(f"{path}: truncated ({len(data)} bytes, expected {expected})")
    return np.frombuffer(data[16:], dtype="<f4").reshape(count, dim).copy()


def save_dense_index(index: DenseIndex, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_vector_block(out / "dense.vec", _DENSE_MAGIC, index.vectors)
    with open(out / "dense.ids.jsonl", "w", encoding="utf-8") as fh:
        for cid in index.chunk_ids:
            fh.write(json.dumps(cid, ensure_ascii=False) + "\n")
    meta = {"embedder_tag": index.embedder_tag, "version": FORMAT_VERSION}
    (out / "dense.meta.json").write_text(
        json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def load_dense_index(in_dir: str | Path) -> DenseIndex:
    src = Path(in_dir)
    vectors = _read_vector_block(src / "dense.vec", _DENSE_MAGIC)
    try:
        meta = json.loads((src / "dense.meta.json").read_text(encoding="utf-8"))
        chunk_ids = [json.loads(ln) for ln in
                     (src / "dense.ids.jsonl").read_text(encoding="utf-8").splitlines() if ln]
    except (OSError, json.JSONDecodeError) as exc:
        raise IndexFormatError(f"{src}: unreadable dense index sidecar: {exc}") from exc
    if len(chunk_ids) != vectors.shape[0]:
        raise IndexFormatError(f"{src}: id sidecar has {len(chunk_ids)} entries "
                               f"for {vectors.shape[0]} vector rows")
    return DenseIndex(dim=vectors.shape[1], vectors=vectors, chunk_ids=chunk_ids,
                      embedder_tag=meta.get("embedder_tag", "unknown"))


def save_sparse_index(index: SparseIndex, path: str | Path) -> None:
    payload = {
        "format": "bm25",
        "version": FORMAT_VERSION,
        "k1": index.k1,
        "b": index.b,
        "epsilon": index.epsilon,
        "doc_lengths": index.doc_lengths,
        "chunk_ids": index.chunk_ids,
        "postings": {t: [[o, f] for o, f in p] for t, p in sorted(index.postings.items())},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def load_sparse_index(path: str | Path) -> SparseIndex:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IndexFormatError(f"{path}: unreadable sparse index: {exc}") from exc
    if payload.get("format") != "bm25":
        raise IndexFormatError(f"{path}: not a sparse index file")
    if payload.get("version") != FORMAT_VERSION:
        raise IndexFormatError(
            f"{path}: format version {payload.get('version')}, expected {FORMAT_VERSION}")
    index = SparseIndex(
        postings={t: [(o, f) for o, f in p] for t, p in payload["postings"].items()},
        doc_lengths=list(payload["doc_lengths"]),
        chunk_ids=list(payload["chunk_ids"]),
        k1=payload["k1"], b=payload["b"], epsilon=payload["epsilon"],
    )
    index.idf = _compute_idf(index.postings, index.N, index.epsilon)
    return index


def save_section_index(index: SectionIndex, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_vector_block(out / "sections.vec", _SECTION_MAGIC, index.centroids)
    meta = {"version": FORMAT_VERSION, "section_ids": index.section_ids,
            "members": index.members}
    (out / "sections.json").write_text(
        json.dumps(meta, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")


def load_section_index(in_dir: str | Path) -> SectionIndex:
    src = Path(in_dir)
    centroids = _read_vector_block(src / "sections.vec", _SECTION_MAGIC)
    try:
        meta = json.loads((src / "sections.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IndexFormatError(f"{src}: unreadable section index metadata: {exc}") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise IndexFormatError(
            f"{src}: format version {meta.get('version')}, expected {FORMAT_VERSION}")
    if len(meta["section_ids"]) != centroids.shape[0]:
        raise IndexFormatError(f"{src}: section ids do not match centroid rows")
    return SectionIndex(section_ids=list(meta["section_ids"]), centroids=centroids,
                        members={k: list(v) for k, v in meta["members"].items()})
