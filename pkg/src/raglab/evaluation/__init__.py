"""Dataset loading, prompting, grid execution, statistics, and reporting."""

from .analysis import (PairDelta, ResultRow, TechniqueDelta, canon,
                       load_results_table, technique_deltas)
from .dataset import MCQuestion, load_dataset
from .grid import (AXIS_COLUMNS, RESULT_COLUMNS, GridCell, GridResources,
                   ItemResult, RunResult, cell_slug, cells_from_axes,
                   read_item_log, run_cell, run_grid)
from .prompts import ABSTAIN, build_prompt, extract_answer
from .report import build_comparisons, collect_run_items, emit_report
from .stats import (PairedComparison, mcnemar, score_run, throughput,
                    wald_ci95, wilson_ci95)

__all__ = [
    "ABSTAIN", "AXIS_COLUMNS", "GridCell", "GridResources", "ItemResult",
    "MCQuestion", "PairDelta", "PairedComparison", "RESULT_COLUMNS",
    "ResultRow", "RunResult", "TechniqueDelta", "build_comparisons",
    "build_prompt", "canon", "cell_slug", "cells_from_axes",
    "collect_run_items", "emit_report", "extract_answer",
    "load_dataset", "load_results_table", "mcnemar", "read_item_log",
    "run_cell", "run_grid", "score_run", "technique_deltas", "throughput",
    "wald_ci95", "wilson_ci95",
]
