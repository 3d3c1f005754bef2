"""Experiment grid runner with per-item persistence and resume.

Each grid cell is one configuration row: the eight axis values of the results
table. Per-item predictions append to ``runs/<slug>.jsonl`` as they are
computed, so a killed run resumes without recomputing finished items, and a
finished cell (already present in ``results.csv``) is never re-executed.
Per-config runtime is the sum of per-item latencies; with
``timing="deterministic"`` every item costs a nominal 1 ms so repeated runs
are byte-identical.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from filelock import FileLock

from ..errors import ConfigError, ProviderError
from ..providers import GenerationParams
from ..retrieval import EvidenceContext, IndexBundle, ProviderSet, RetrievalConfig, run_pipeline
from .dataset import MCQuestion
from .prompts import build_prompt, extract_answer
from .stats import score_run, throughput, wald_ci95

log = logging.getLogger(__name__)

AXIS_COLUMNS = ("family", "index", "retrieval_mode", "coarse_mode", "reranker",
                "reformulation", "prompt_mode", "llm_model")
RESULT_COLUMNS = AXIS_COLUMNS + ("accuracy", "runtime")

_AXIS_VOCAB = {
    "retrieval_mode": {"dense", "hybrid", "none"},
    "coarse_mode": {"off", "on", "none"},
    "reranker": {"off", "on", "none"},
    "reformulation": {"off", "on", "none"},
    "prompt_mode": {"zero_shot", "cot"},
}

GENERATION_PARAMS = {
    "zero_shot": GenerationParams(max_output_tokens=512, temperature=0.0),
    "cot": GenerationParams(max_output_tokens=2048, temperature=0.0),
}


@dataclass(frozen=True)
class GridCell:
    family: str
    index: str
    retrieval_mode: str
    coarse_mode: str
    reranker: str
    reformulation: str
    prompt_mode: str
    llm_model: str

    @property
    def is_rag(self) -> bool:
        return self.retrieval_mode != "none"

    def as_row(self) -> Dict[str, str]:
        return {col: getattr(self, col) for col in AXIS_COLUMNS}


@dataclass
class ItemResult:
    qid: str
    predicted: str
    gold: str
    correct: bool
    latency_ms: int
    evidence_chunk_ids: List[str] = field(default_factory=list)


@dataclass
class RunResult:
    cell: GridCell
    items: List[ItemResult]
    accuracy: float
    runtime_s: float
    throughput: float
    ci95: tuple


@dataclass
class GridResources:
    """Resolved per-name resources a grid run draws from."""

    index_bundles: Dict[str, IndexBundle] = field(default_factory=dict)
    embedders: Dict[str, object] = field(default_factory=dict)
    generators: Dict[str, object] = field(default_factory=dict)
    reranker: Optional[object] = None


def cells_from_axes(axes: Dict[str, List[str]], generators: Sequence[str],
                    index_names: Sequence[str]) -> List[GridCell]:
    """Expand grid axes into deduplicated cells.

    Cells with retrieval_mode "none" (NO RAG) have every other retrieval axis
    forced to "none" before deduplication, matching the results-table shape.
    Unknown axis names or values fail before anything executes.
    """
    known = {"llm_model", "index", "retrieval_mode", "coarse_mode", "reranker",
             "reformulation", "prompt_mode"}
    unknown = set(axes) - known
    if unknown:
        raise ConfigError(f"unknown grid axes: {sorted(unknown)}")
    for axis, vocab in _AXIS_VOCAB.items():
        for value in axes.get(axis, []):
            if value not in vocab:
                raise ConfigError(f"grid axis {axis!r}: invalid value {value!r} "
                                  f"(allowed: {sorted(vocab)})")
    for model in axes.get("llm_model", []):
        if model not in generators:
            raise ConfigError(f"grid axis llm_model: {model!r} is not a configured generator")
    for name in axes.get("index", []):
        if name != "none" and name not in index_names:
            raise ConfigError(f"grid axis index: {name!r} is not a configured index")

    order = ("llm_model", "index", "retrieval_mode", "coarse_mode", "reranker",
             "reformulation", "prompt_mode")
    values = [axes.get(axis) or ["none" if axis not in ("llm_model", "prompt_mode") else None]
              for axis in order]
    for axis, vals in zip(order, values):
        if vals == [None]:
            raise ConfigError(f"grid axis {axis!r} must list at least one value")

    cells: List[GridCell] = []
    seen = set()
    for llm, index, mode, coarse, rer, ref, prompt in itertools.product(*values):
        if mode == "none":
            index, coarse, rer, ref = "none", "none", "none", "none"
        family = "NO RAG" if mode == "none" else "RAG"
        cell = GridCell(family, index, mode, coarse, rer, ref, prompt, llm)
        if cell not in seen:
            seen.add(cell)
            cells.append(cell)
    return cells


_SLUG_RE = re.compile(r"[^A-Za-z0-9._-]+")


def cell_slug(cell: GridCell) -> str:
    parts = [getattr(cell, col) for col in AXIS_COLUMNS]
    return "__".join(_SLUG_RE.sub("_", p) for p in parts)


# --- per-item persistence -------------------------------------------------------

def append_item(path: Path, item: ItemResult) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(dataclasses.asdict(item), sort_keys=True) + "\n")
        fh.flush()


def read_item_log(path: Path) -> List[ItemResult]:
    """Load persisted items, dropping a truncated trailing line if present."""
    items: List[ItemResult] = []
    if not path.exists():
        return items
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            items.append(ItemResult(**obj))
        except (json.JSONDecodeError, TypeError):
            log.warning("%s: dropping unreadable item log line %d (interrupted write?)",
                        path, lineno)
            break
    return items


# --- results table ----------------------------------------------------------------

def results_csv_header() -> str:
    return ",".join(RESULT_COLUMNS)


def format_result_row(cell: GridCell, accuracy: float, runtime_s: float) -> str:
    fields = [getattr(cell, col) for col in AXIS_COLUMNS]
    fields += [f"{accuracy:.6f}", f"{runtime_s:.3f}"]
    return ",".join(fields)


def append_result_row(results_path: Path, row: str) -> None:
    lock = FileLock(str(results_path) + ".lock")
    with lock:
        new_file = not results_path.exists()
        with open(results_path, "a", encoding="utf-8") as fh:
            if new_file:
                fh.write(results_csv_header() + "\n")
            fh.write(row + "\n")


def completed_cells(results_path: Path) -> set:
    done = set()
    if not results_path.exists():
        return done
    lines = results_path.read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        if line.strip():
            done.add(tuple(line.split(",")[: len(AXIS_COLUMNS)]))
    return done


# --- evaluation ---------------------------------------------------------------------

def _retrieval_config_for(cell: GridCell, base: RetrievalConfig) -> RetrievalConfig:
    return replace(base, retrieval_mode=cell.retrieval_mode, coarse=cell.coarse_mode,
                   reranker=cell.reranker, reformulation=cell.reformulation)


def evaluate_item(question: MCQuestion, cell: GridCell, cfg: Optional[RetrievalConfig],
                  indexes: Optional[IndexBundle], providers: ProviderSet,
                  timing: str) -> ItemResult:
    start = time.perf_counter()
    evidence: Optional[EvidenceContext] = None
    if cell.is_rag:
        evidence, _trace = run_pipeline(question.stem, cfg, indexes, providers)
    prompt = build_prompt(question, evidence, cell.prompt_mode)
    generation = providers.generator.generate(prompt, GENERATION_PARAMS[cell.prompt_mode])
    predicted = extract_answer(generation, set(question.options))
    latency_ms = 1 if timing == "deterministic" else int(
        round((time.perf_counter() - start) * 1000.0))
    return ItemResult(
        qid=question.qid,
        predicted=predicted,
        gold=question.gold,
        correct=predicted == question.gold,
        latency_ms=latency_ms,
        evidence_chunk_ids=evidence.chunk_ids if evidence else [],
    )


def run_cell(cell: GridCell, questions: Sequence[MCQuestion],
             resources: GridResources, base_retrieval: RetrievalConfig,
             out_dir: Path, timing: str = "wall") -> RunResult:
    """Evaluate one configuration, resuming from its item log if present."""
    runs_dir = out_dir / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    log_path = runs_dir / f"{cell_slug(cell)}.jsonl"

    cfg = indexes = None
    if cell.is_rag:
        cfg = _retrieval_config_for(cell, base_retrieval)
        indexes = resources.index_bundles[cell.index]
    providers = ProviderSet(
        embedder=resources.embedders.get(cell.index),
        generator=resources.generators[cell.llm_model],
        reranker=resources.reranker,
    )

    existing = read_item_log(log_path)
    done_qids = {it.qid for it in existing}
    if len(existing) != len(done_qids):
        raise ConfigError(f"{log_path}: duplicate qids in item log")
    items = list(existing)
    for question in questions:
        if question.qid in done_qids:
            continue
        item = evaluate_item(question, cell, cfg, indexes, providers, timing)
        append_item(log_path, item)
        items.append(item)

    accuracy = score_run(items)
    runtime_s = max(sum(it.latency_ms for it in items) / 1000.0, 0.001)
    return RunResult(cell=cell, items=items, accuracy=accuracy, runtime_s=runtime_s,
                     throughput=throughput(len(items), runtime_s),
                     ci95=wald_ci95(accuracy, len(items)))


def run_grid(cells: Sequence[GridCell], questions: Sequence[MCQuestion],
             resources: GridResources, base_retrieval: RetrievalConfig,
             out_dir: str | Path, timing: str = "wall") -> List[RunResult]:
    """Run every cell, skipping ones already present in the results table.

    A provider failure marks the cell failed (recorded in failures.jsonl) and
    the remaining cells continue. Any other exception propagates, leaving the
    partial item log behind for a later resume.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "results.csv"
    done = completed_cells(results_path)

    results: List[RunResult] = []
    for cell in cells:
        key = tuple(getattr(cell, col) for col in AXIS_COLUMNS)
        if key in done:
            log.info("skipping completed cell %s", cell_slug(cell))
            items = read_item_log(out / "runs" / f"{cell_slug(cell)}.jsonl")
            if items:
                accuracy = score_run(items)
                runtime_s = max(sum(it.latency_ms for it in items) / 1000.0, 0.001)
                results.append(RunResult(cell, items, accuracy, runtime_s,
                                         throughput(len(items), runtime_s),
                                         wald_ci95(accuracy, len(items))))
            continue
        try:
            run = run_cell(cell, questions, resources, base_retrieval, out, timing)
        except ProviderError as exc:
            log.error("cell %s failed: %s", cell_slug(cell), exc)
            with open(out / "failures.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"cell": cell.as_row(), "error": str(exc)},
                                    sort_keys=True) + "\n")
            continue
        append_result_row(results_path, format_result_row(run.cell, run.accuracy,
                                                          run.runtime_s))
        results.append(run)
    return results
