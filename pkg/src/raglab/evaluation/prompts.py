"""Prompt templates and answer-letter extraction.

The extraction cascade is fixed and versioned: changing it changes every
reported accuracy, so looseness is rejected in favor of stable rules.
"""

from __future__ import annotations

import re
from typing import Optional, Set

from ..retrieval import EvidenceContext
from .dataset import MCQuestion

ABSTAIN = "ABSTAIN"

ZERO_SHOT_INSTRUCTION = "Answer with the single letter of the correct option."
COT_INSTRUCTION = ("Think step by step, then give your final answer on its own "
                   "line as 'Answer: <letter>'.")

PROMPT_MODES = ("zero_shot", "cot")


def build_prompt(question: MCQuestion, evidence: Optional[EvidenceContext],
                 mode: str) -> str:
    """Deterministic prompt: evidence block (rank order), stem, options, instruction."""
    if mode not in PROMPT_MODES:
        raise ValueError(f"unknown prompt mode {mode!r}")
    parts = []
    if evidence is not None and evidence.passages:
        lines = ["Evidence:"]
        for i, passage in enumerate(evidence.passages, start=1):
            lines.append(f"[{i}] ({passage.chunk_id}) {passage.text}")
        parts.append("\n".join(lines))
    option_lines = "\n".join(f"{letter}. {text}"
                             for letter, text in sorted(question.options.items()))
    parts.append(f"Question: {question.stem}")
    parts.append(f"Options:\n{option_lines}")
    parts.append(ZERO_SHOT_INSTRUCTION if mode == "zero_shot" else COT_INSTRUCTION)
    return "\n\n".join(parts)


_RULE1_RE = re.compile(r"Answer[:\s]*\(?([A-Z])\)?")
_RULE2_RE = re.compile(r"\s*\(?([A-Z])\)?(?=[\s.,:;)]|$)")
_RULE3_RE = re.compile(r"\(([A-Z])\)|\b([A-Z])\.")


def extract_answer(generation: str, option_letters: Set[str]) -> str:
    """First matching rule wins:

    1. last ``Answer: X`` occurrence with X among the option letters;
    2. a standalone option letter at the start of the output;
    3. earliest ``(X)`` or ``X.`` with X among the option letters;
    otherwise ABSTAIN.
    """
    hits = [m.group(1) for m in _RULE1_RE.finditer(generation)
            if m.group(1) in option_letters]
    if hits:
        return hits[-1]
    m = _RULE2_RE.match(generation)
    if m and m.group(1) in option_letters:
        return m.group(1)
    for m in _RULE3_RE.finditer(generation):
        letter = m.group(1) or m.group(2)
        if letter in option_letters:
            return letter
    return ABSTAIN
