"""Multiple-choice dataset loading and validation."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

from ..errors import SchemaError


@dataclass(frozen=True)
class MCQuestion:
    qid: str
    stem: str
    options: Dict[str, str]   # option letter -> option text, letters from 'A'
    gold: str

    def __post_init__(self) -> None:
        if len(self.options) < 2:
            raise SchemaError(f"question {self.qid}: needs at least two options")
        expected = list(string.ascii_uppercase[: len(self.options)])
        if sorted(self.options) != expected:
            raise SchemaError(
                f"question {self.qid}: option letters must be consecutive from 'A', "
                f"got {sorted(self.options)}")
        if self.gold not in self.options:
            raise SchemaError(f"question {self.qid}: gold letter {self.gold!r} "
                              f"not among options {sorted(self.options)}")


def load_dataset(path: str | Path) -> List[MCQuestion]:
    """Read a JSONL dataset: {question, options: {A: ...}, answer, qid?}.

    qid is synthesized from the line number when absent. Schema violations
    raise SchemaError naming the offending line.
    """
    questions: List[MCQuestion] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}: malformed JSON on line {lineno}: {exc}") from exc
            try:
                questions.append(MCQuestion(
                    qid=str(obj.get("qid", f"q{lineno:04d}")),
                    stem=obj["question"],
                    options=dict(obj["options"]),
                    gold=obj["answer"],
                ))
            except KeyError as exc:
                raise SchemaError(f"{path}: line {lineno} missing field {exc}") from exc
            except SchemaError as exc:
                raise SchemaError(f"{path}: line {lineno}: {exc}") from exc
    return questions
