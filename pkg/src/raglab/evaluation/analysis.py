"""Matched-pair analysis over a results table.

Pairs are rows identical on every configuration column except one axis; the
reported delta is first-minus-second (on-minus-off, hybrid-minus-dense).
Values are canonicalized for matching only (case, surrounding whitespace,
stray underscores, spaces-vs-underscores), so transcription quirks in a
results table do not silently drop pairs; the stored values are untouched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from ..errors import SchemaError
from .grid import AXIS_COLUMNS, RESULT_COLUMNS

DELTA_AXES = ("reranker", "reformulation", "retrieval_mode", "coarse_mode", "index")

_DEFAULT_ORIENTATION = {
    "reranker": ("on", "off"),
    "reformulation": ("on", "off"),
    "retrieval_mode": ("hybrid", "dense"),
    "coarse_mode": ("on", "off"),
    "index": ("medembed", "bge"),
}


def canon(value: str) -> str:
    """Canonical form for config-value matching (not for storage)."""
    return value.strip().strip("_").casefold().replace(" ", "_")


@dataclass(frozen=True)
class ResultRow:
    family: str
    index: str
    retrieval_mode: str
    coarse_mode: str
    reranker: str
    reformulation: str
    prompt_mode: str
    llm_model: str
    accuracy: float
    runtime: float

    def axis_value(self, axis: str) -> str:
        return getattr(self, axis)

    def key(self) -> Tuple[str, ...]:
        return tuple(canon(getattr(self, col)) for col in AXIS_COLUMNS)


def load_results_table(path: str | Path) -> List[ResultRow]:
    rows: List[ResultRow] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RESULT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise SchemaError(f"{path}: results table missing columns {sorted(missing)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                rows.append(ResultRow(
                    **{col: rec[col] for col in AXIS_COLUMNS},
                    accuracy=float(rec["accuracy"]),
                    runtime=float(rec["runtime"]),
                ))
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}: line {lineno}: {exc}") from exc
    return rows


@dataclass(frozen=True)
class PairDelta:
    match_key: Tuple[str, ...]        # canonical values of the non-axis columns
    first_row: ResultRow
    second_row: ResultRow
    delta_accuracy: float
    delta_runtime: float


@dataclass(frozen=True)
class TechniqueDelta:
    axis: str
    first: str
    second: str
    n_pairs: int
    mean_delta_accuracy: float
    mean_delta_runtime: float
    pairs: Tuple[PairDelta, ...]


def technique_deltas(rows: List[ResultRow], axis: str,
                     first: Optional[str] = None, second: Optional[str] = None,
                     where: Optional[Dict[str, str]] = None) -> TechniqueDelta:
    """Mean first-minus-second accuracy/runtime delta over matched row pairs.

    ``where`` restricts the rows considered (canonical comparison per column)
    before pairing. Rows whose axis value is neither ``first`` nor ``second``
    are ignored; rows without a counterpart are ignored. Zero surviving pairs
    is an error.
    """
    if axis not in DELTA_AXES:
        raise ValueError(f"axis must be one of {DELTA_AXES}, got {axis!r}")
    if (first is None) != (second is None):
        raise ValueError("give both first and second, or neither")
    if first is None:
        first, second = _DEFAULT_ORIENTATION[axis]
    first_c, second_c = canon(first), canon(second)

    if where:
        rows = [r for r in rows
                if all(canon(r.axis_value(col)) == canon(val) for col, val in where.items())]

    match_cols = [col for col in AXIS_COLUMNS if col != axis]
    sides: Dict[Tuple[str, ...], Dict[str, ResultRow]] = {}
    for row in rows:
        value = canon(row.axis_value(axis))
        if value not in (first_c, second_c):
            continue
        key = tuple(canon(row.axis_value(col)) for col in match_cols)
        slot = sides.setdefault(key, {})
        if value in slot:
            continue  # duplicate configuration: first occurrence wins
        slot[value] = row

    pairs: List[PairDelta] = []
    for key in sorted(sides):
        slot = sides[key]
        if first_c in slot and second_c in slot:
            a, b = slot[first_c], slot[second_c]
            pairs.append(PairDelta(key, a, b, a.accuracy - b.accuracy,
                                   a.runtime - b.runtime))
    if not pairs:
        raise ValueError(f"no matched pairs for axis {axis!r} ({first} vs {second})")
    n = len(pairs)
    return TechniqueDelta(
        axis=axis, first=first, second=second, n_pairs=n,
        mean_delta_accuracy=sum(p.delta_accuracy for p in pairs) / n,
        mean_delta_runtime=sum(p.delta_runtime for p in pairs) / n,
        pairs=tuple(pairs),
    )
