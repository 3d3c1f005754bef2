"""Corpus ingestion: cleaning, structural segmentation, sentence-safe chunking.

Raw textbook-style text files go through four stages:

1. ``clean_text``  - strip URLs, bracketed citation markers, figure/table
   caption lines, and repeated whitespace. Idempotent.
2. ``segment_structure`` - split a document into (chapter, section) units.
   Headings follow an explicit marker convention: a line starting with ``# ``
   opens a chapter, ``## `` opens a section; an all-caps line is accepted as a
   section heading fallback. A document without detectable headings becomes a
   single default section.
3. ``split_and_filter_paragraphs`` - blank-line paragraph split, dropping
   fragments below a token threshold.
4. ``chunk_section`` - greedy sentence accumulation into a token window with
   rollback at sentence boundaries. Chunks never end mid-sentence; a single
   sentence longer than the window is kept whole and flagged oversized.

Chunks persist as JSONL, one object per line, and round-trip exactly.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List

from .errors import SchemaError
from .tokenizer import Tokenizer, count_tokens


@dataclass(frozen=True)
class RawDocument:
    """One source file: a book name and its full body text."""

    book_name: str
    body: str

    def __post_init__(self) -> None:
        if not self.body.strip():
            raise ValueError(f"document {self.book_name!r} has an empty body")


@dataclass
class Section:
    """A contiguous (chapter, section) slice of one book, as paragraph texts."""

    book_name: str
    chapter_title: str
    section_title: str
    paragraphs: List[str]
    section_id: str


@dataclass(frozen=True)
class ChunkingParams:
    max_tokens: int = 512
    min_paragraph_tokens: int = 20
    min_chunk_tokens: int = 30

    def __post_init__(self) -> None:
        if self.max_tokens <= 0 or self.min_paragraph_tokens <= 0 or self.min_chunk_tokens <= 0:
            raise ValueError("chunking parameters must be positive")
        if self.min_chunk_tokens >= self.max_tokens:
            raise ValueError("min_chunk_tokens must be smaller than max_tokens")


@dataclass
class ChunkRecord:
    """One sentence-safe retrieval unit plus its source metadata."""

    chunk_id: str
    text: str
    book: str
    chapter: str
    section: str
    n_tokens: int
    oversized: bool = False

    REQUIRED_FIELDS = ("chunk_id", "text", "book", "chapter", "section", "n_tokens")


# --- cleaning ---------------------------------------------------------------

_URL_RE = re.compile(r"(?:https?://|www\.)\S+")
_CITATION_RE = re.compile(r"\[\d+(?:\s*[,;–—-]\s*\d+)*\]")
_CAPTION_RE = re.compile(r"^(?:Figure|Table)\s+\d")
_HSPACE_RE = re.compile(r"[ \t\f\v]{2,}")
_MANY_NEWLINES_RE = re.compile(r"\n{3,}")


def clean_text(raw: str) -> str:
    """Remove URLs, citation markers, caption lines, and whitespace runs.

    Line structure is preserved: runs of spaces/tabs collapse to one space
    within a line, and runs of 3+ newlines collapse to a single blank line so
    paragraph boundaries survive. Applying the function twice is a no-op.
    """
    text = _URL_RE.sub("", raw)
    text = _CITATION_RE.sub("", text)
    lines = [ln for ln in text.split("\n") if not _CAPTION_RE.match(ln.strip())]
    lines = [_HSPACE_RE.sub(" ", ln).strip() for ln in lines]
    text = "\n".join(lines)
    text = _MANY_NEWLINES_RE.sub("\n\n", text)
    return text.strip()


# --- structural segmentation -------------------------------------------------

_ALLCAPS_RE = re.compile(r"^[A-Z][A-Z0-9 ,&/'-]{3,}$")


def _is_allcaps_heading(line: str) -> bool:
    return bool(_ALLCAPS_RE.match(line)) and any(c.isalpha() for c in line)


def segment_structure(doc: RawDocument) -> List[Section]:
    """Split a cleaned document into ordered (chapter, section) units.

    Every retained body line lands in exactly one section. With no detectable
    headings the whole body becomes Section(chapter=<book>, section="body").
    Section ids are ``book/chapter/section`` paths, deduplicated with a
    numeric suffix when titles repeat.
    """
    chapter = doc.book_name
    section = "body"
    sections: List[Section] = []
    buffer: List[str] = []
    seen_ids: Counter[str] = Counter()

    def flush() -> None:
        body = "\n".join(buffer).strip()
        buffer.clear()
        if not body:
            return
        base_id = f"{doc.book_name}/{chapter}/{section}"
        seen_ids[base_id] += 1
        sec_id = base_id if seen_ids[base_id] == 1 else f"{base_id}#{seen_ids[base_id]}"
        paragraphs = [p.strip() for p in re.split(r"\n\s*\n", body) if p.strip()]
        sections.append(Section(doc.book_name, chapter, section, paragraphs, sec_id))

    for line in doc.body.split("\n"):
        stripped = line.strip()
        if stripped.startswith("## "):
            flush()
            section = stripped[3:].strip()
        elif stripped.startswith("# "):
            flush()
            chapter = stripped[2:].strip()
            section = "body"
        elif _is_allcaps_heading(stripped):
            flush()
            section = stripped
        else:
            buffer.append(line)
    flush()
    return sections


def split_and_filter_paragraphs(section_text: str, params: ChunkingParams,
                                tokenizer: Tokenizer | None = None) -> List[str]:
    """Blank-line paragraph split, dropping fragments under the token floor."""
    parts = [p.strip() for p in re.split(r"\n\s*\n", section_text) if p.strip()]
    return [p for p in parts if count_tokens(p, tokenizer) >= params.min_paragraph_tokens]


# --- sentence splitting -------------------------------------------------------

_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.?!])\s+(?=[A-Z])")


def split_sentences(paragraph: str) -> List[str]:
    """Split after '.', '?' or '!' when followed by whitespace and a capital.

    Joining the result with single spaces reproduces the paragraph up to
    whitespace normalization. Unterminated trailing text is returned as its
    own (final) sentence. Decimal-style abbreviations ("5 mg. Repeat") split
    by design; the rule is positional, not lexical.
    """
    normalized = re.sub(r"\s+", " ", paragraph).strip()
    if not normalized:
        return []
    return [s for s in _SENTENCE_SPLIT_RE.split(normalized) if s]


# --- chunking -----------------------------------------------------------------

def chunk_section(section: Section, params: ChunkingParams,
                  tokenizer: Tokenizer | None = None) -> List[ChunkRecord]:
    """Greedy sentence-window chunking with rollback at sentence boundaries.

    Sentences accumulate until adding the next one would exceed
    ``params.max_tokens``; the chunk then closes at the previous sentence
    boundary and the overflowing sentence starts the next chunk. A single
    sentence above the window becomes its own chunk flagged ``oversized``.
    A trailing chunk below ``params.min_chunk_tokens`` is merged into the
    previous chunk when one exists (flagged oversized if the merge overflows
    the window).
    """
    sentences: List[str] = []
    for paragraph in section.paragraphs:
        sentences.extend(split_sentences(paragraph))
    if not sentences:
        return []

    counts = [count_tokens(s, tokenizer) for s in sentences]
    groups: List[List[int]] = []  # sentence indices per chunk
    current: List[int] = []
    current_tokens = 0
    for i, n in enumerate(counts):
        if current and current_tokens + n > params.max_tokens:
            groups.append(current)
            current = [i]
            current_tokens = n
        else:
            current.append(i)
            current_tokens += n
    if current:
        groups.append(current)

    if len(groups) >= 2 and sum(counts[i] for i in groups[-1]) < params.min_chunk_tokens:
        tail = groups.pop()
        groups[-1].extend(tail)

    records: List[ChunkRecord] = []
    for ordinal, group in enumerate(groups):
        text = " ".join(sentences[i] for i in group)
        n_tokens = sum(counts[i] for i in group)
        records.append(ChunkRecord(
            chunk_id=f"{section.section_id}:{ordinal:04d}",
            text=text,
            book=section.book_name,
            chapter=section.chapter_title,
            section=section.section_title,
            n_tokens=n_tokens,
            oversized=n_tokens > params.max_tokens,
        ))
    return records


# --- whole-document / whole-directory drivers ---------------------------------

def ingest_document(doc: RawDocument, params: ChunkingParams,
                    tokenizer: Tokenizer | None = None) -> List[ChunkRecord]:
    """Clean, segment, filter, and chunk one document."""
    cleaned = clean_text(doc.body)
    chunks: List[ChunkRecord] = []
    for section in segment_structure(RawDocument(doc.book_name, cleaned)):
        section.paragraphs = split_and_filter_paragraphs(
            "\n\n".join(section.paragraphs), params, tokenizer)
        chunks.extend(chunk_section(section, params, tokenizer))
    return chunks


def ingest_directory(corpus_dir: str | Path, params: ChunkingParams,
                     tokenizer: Tokenizer | None = None) -> List[ChunkRecord]:
    """Ingest every ``*.txt`` file under a directory, sorted by name."""
    corpus = Path(corpus_dir)
    files = sorted(corpus.glob("*.txt"))
    if not files:
        raise FileNotFoundError(f"no .txt files under {corpus}")
    chunks: List[ChunkRecord] = []
    for path in files:
        doc = RawDocument(path.stem, path.read_text(encoding="utf-8"))
        chunks.extend(ingest_document(doc, params, tokenizer))
    return chunks


# --- JSONL persistence ----------------------------------------------------------

def write_chunks(chunks: Iterable[ChunkRecord], path: str | Path) -> None:
    """One JSON object per chunk per line; key order fixed for determinism."""
    with open(path, "w", encoding="utf-8") as fh:
        for chunk in chunks:
            obj = {
                "chunk_id": chunk.chunk_id,
                "text": chunk.text,
                "book": chunk.book,
                "chapter": chunk.chapter,
                "section": chunk.section,
                "n_tokens": chunk.n_tokens,
            }
            if chunk.oversized:
                obj["oversized"] = True
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


def read_chunks(path: str | Path) -> List[ChunkRecord]:
    """Inverse of write_chunks; errors name the offending line."""
    records: List[ChunkRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}: malformed JSON on line {lineno}: {exc}") from exc
            missing = [f for f in ChunkRecord.REQUIRED_FIELDS if f not in obj]
            if missing:
                raise SchemaError(f"{path}: line {lineno} missing fields {missing}")
            records.append(ChunkRecord(
                chunk_id=obj["chunk_id"],
                text=obj["text"],
                book=obj["book"],
                chapter=obj["chapter"],
                section=obj["section"],
                n_tokens=obj["n_tokens"],
                oversized=bool(obj.get("oversized", False)),
            ))
    return records
