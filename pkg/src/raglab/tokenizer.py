"""Deterministic tokenization used for token counting, windows, and BM25 terms.

The default tokenizer intentionally avoids any model dependency: a token is
either a maximal run of alphanumeric characters or a single punctuation mark.
Whitespace never contributes tokens, so the token count of a chunk equals the
sum of the token counts of the sentences it joins. Any callable with the same
``str -> list[str]`` signature can be plugged in wherever a tokenizer is
accepted.
"""

from __future__ import annotations

import re
from typing import Callable, List

Tokenizer = Callable[[str], List[str]]

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> List[str]:
    """Split text into word runs and individual punctuation marks."""
    return _TOKEN_RE.findall(text)


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    """Number of tokens under the given tokenizer (default rule above)."""
    tok = tokenizer or tokenize
    return len(tok(text))


def query_terms(text: str, tokenizer: Tokenizer | None = None) -> List[str]:
    """Lowercased terms for sparse (BM25) matching, same token rule."""
    tok = tokenizer or tokenize
    return [t.lower() for t in tok(text)]
