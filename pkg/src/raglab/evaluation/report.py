"""Report emission: delimited tables plus rendered figures.

Everything derives from the persisted results table (and, when available,
per-run item logs for n); re-running the report never changes its outputs.
Numeric formatting is fixed: accuracies print with 6 decimals, runtimes and
runtime deltas with 1 decimal, throughput with 3.

Outputs (under ``<out>/report/``):

* leaderboard.csv        - all rows sorted by accuracy (stable).
* baseline.csv           - NO-RAG rows with throughput.
* top_configs.csv        - best rows annotated with a Wald 95% CI.
* technique_deltas.csv   - matched-pair accuracy/runtime deltas per axis.
* mcnemar.csv            - paired significance tests.
* tradeoff.csv           - (runtime, accuracy) points for log-x plotting.
* tradeoff.png, technique_deltas.png, embedding_comparison.png
* report_summary.txt     - notes (skipped axes, pair counts).
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .analysis import ResultRow, TechniqueDelta, canon, technique_deltas
from .grid import AXIS_COLUMNS, GridCell, ItemResult, cell_slug, read_item_log
from .stats import PairedComparison, mcnemar, wald_ci95, wilson_ci95

CI_METHODS = {"wald": wald_ci95, "wilson": wilson_ci95}

REPORT_DELTA_AXES = ("reranker", "reformulation", "retrieval_mode", "coarse_mode")
TOP_CONFIGS = 5

EMBEDDING_COMPARISON_SCOPE = {
    "retrieval_mode": "dense",
    "reformulation": "on",
    "prompt_mode": "zero_shot",
}


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    lines = [",".join(header)] + [",".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _row_fields(row: ResultRow) -> List[str]:
    return [row.axis_value(col) for col in AXIS_COLUMNS]


def _config_label(row: ResultRow) -> str:
    if canon(row.family) == "no_rag":
        return f"{row.llm_model}/{row.prompt_mode}/no-rag"
    bits = [row.llm_model, row.prompt_mode, row.index, row.retrieval_mode]
    for axis, short in (("coarse_mode", "coarse"), ("reranker", "rerank"),
                        ("reformulation", "reform")):
        if canon(row.axis_value(axis)) == "on":
            bits.append(short)
    return "/".join(bits)


def emit_report(rows: List[ResultRow], comparisons: Sequence[PairedComparison],
                out_dir: str | Path, n_items: Optional[int] = None,
                n_by_key: Optional[Dict[Tuple[str, ...], int]] = None,
                ci_method: str = "wald") -> Dict[str, Path]:
    """Write every report table and figure; returns name -> path.

    ``ci_method`` switches the top-configs interval between Wald (default,
    matching the published tables) and Wilson.
    """
    if not rows:
        raise ValueError("cannot report on an empty results table")
    if ci_method not in CI_METHODS:
        raise ValueError(f"ci_method must be one of {sorted(CI_METHODS)}")
    ci_fn = CI_METHODS[ci_method]
    report_dir = Path(out_dir) / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    notes: List[str] = []
    written: Dict[str, Path] = {}

    def n_for(row: ResultRow) -> Optional[int]:
        if n_by_key and row.key() in n_by_key:
            return n_by_key[row.key()]
        return n_items

    # (a) leaderboard: stable sort keeps input order among equal accuracies
    leaderboard = sorted(rows, key=lambda r: -r.accuracy)
    path = report_dir / "leaderboard.csv"
    _write_csv(path, list(AXIS_COLUMNS) + ["accuracy", "runtime"],
               [_row_fields(r) + [f"{r.accuracy:.6f}", f"{r.runtime:.1f}"]
                for r in leaderboard])
    written["leaderboard"] = path

    # (b) baselines (NO-RAG rows)
    baselines = [r for r in rows if canon(r.family) == "no_rag"]
    baseline_rows = []
    for r in sorted(baselines, key=lambda r: -r.accuracy):
        n = n_for(r)
        tput = f"{n / r.runtime:.3f}" if n and r.runtime > 0 else ""
        baseline_rows.append([r.llm_model, r.prompt_mode, f"{r.accuracy:.6f}",
                              f"{r.runtime:.1f}", tput])
    path = report_dir / "baseline.csv"
    _write_csv(path, ["llm_model", "prompt_mode", "accuracy", "runtime",
                      "throughput"], baseline_rows)
    written["baseline"] = path
    if not baselines:
        notes.append("no NO-RAG baseline rows in the results table")

    # (c) top configurations with Wald CI
    top_rows = []
    for r in leaderboard[:TOP_CONFIGS]:
        n = n_for(r)
        lo, hi = ci_fn(r.accuracy, n) if n else ("", "")
        top_rows.append(_row_fields(r) + [
            f"{r.accuracy:.6f}",
            f"{lo:.6f}" if n else "", f"{hi:.6f}" if n else "",
            f"{r.runtime:.1f}"])
        if not n:
            notes.append("top_configs: item count unknown, CI columns left empty")
    path = report_dir / "top_configs.csv"
    _write_csv(path, list(AXIS_COLUMNS) + ["accuracy", "ci_lo", "ci_hi", "runtime"],
               top_rows)
    written["top_configs"] = path

    # (d) technique deltas
    deltas: List[TechniqueDelta] = []
    delta_rows = []
    for axis in REPORT_DELTA_AXES:
        try:
            delta = technique_deltas(rows, axis)
        except ValueError:
            notes.append(f"technique_deltas: no matched pairs for axis {axis!r}")
            continue
        deltas.append(delta)
        delta_rows.append([axis, delta.first, delta.second, str(delta.n_pairs),
                           f"{delta.mean_delta_accuracy:+.6f}",
                           f"{delta.mean_delta_runtime:+.1f}"])
    path = report_dir / "technique_deltas.csv"
    _write_csv(path, ["technique", "first", "second", "n_pairs",
                      "delta_accuracy", "delta_runtime"], delta_rows)
    written["technique_deltas"] = path
    if not delta_rows:
        notes.append("technique_deltas table is empty: no axis had matched pairs "
                     "(a single run cannot be paired)")

    # (e) McNemar
    path = report_dir / "mcnemar.csv"
    _write_csv(path, ["comparison", "b", "c", "n", "delta_acc", "p_value", "method"],
               [[c.name, str(c.b), str(c.c), str(c.n), f"{c.delta_acc:+.6f}",
                 f"{c.p_value:.6g}", c.method] for c in comparisons])
    written["mcnemar"] = path
    if not comparisons:
        notes.append("no paired item logs available for McNemar comparisons")

    # (f) tradeoff scatter data
    path = report_dir / "tradeoff.csv"
    _write_csv(path, ["label", "family", "llm_model", "prompt_mode", "accuracy",
                      "runtime"],
               [[_config_label(r), r.family, r.llm_model, r.prompt_mode,
                 f"{r.accuracy:.6f}", f"{r.runtime:.1f}"] for r in leaderboard])
    written["tradeoff"] = path

    written.update(_render_figures(report_dir, leaderboard, deltas, rows, notes))

    summary = report_dir / "report_summary.txt"
    summary.write_text(
        "\n".join([f"rows: {len(rows)}", f"comparisons: {len(comparisons)}"]
                  + [f"note: {n}" for n in notes]) + "\n", encoding="utf-8")
    written["summary"] = summary
    return written


def collect_run_items(rows: List[ResultRow],
                      runs_dir: Path) -> Dict[Tuple[str, ...], List[ItemResult]]:
    """Map each results row (canonical key) to its persisted item log, if any."""
    items_by_key: Dict[Tuple[str, ...], List[ItemResult]] = {}
    for row in rows:
        cell = GridCell(**{col: row.axis_value(col) for col in AXIS_COLUMNS})
        log_path = runs_dir / f"{cell_slug(cell)}.jsonl"
        if log_path.exists():
            items = read_item_log(log_path)
            if items:
                items_by_key[row.key()] = items
    return items_by_key


def build_comparisons(rows: List[ResultRow], runs_dir: Path) -> List[PairedComparison]:
    """Paired tests against the best run with a persisted item log.

    With NO-RAG baselines present each baseline is compared to the best run;
    otherwise every other logged run is. Orientation is best-minus-other.
    """
    items_by_key = collect_run_items(rows, runs_dir)
    logged = [r for r in rows if r.key() in items_by_key]
    if len(logged) < 2:
        return []
    best = max(logged, key=lambda r: r.accuracy)
    best_items = items_by_key[best.key()]
    baselines = [r for r in logged if canon(r.family) == "no_rag" and r.key() != best.key()]
    others = baselines or [r for r in logged if r.key() != best.key()]
    comparisons: List[PairedComparison] = []
    for other in others:
        other_items = items_by_key[other.key()]
        if {it.qid for it in other_items} != {it.qid for it in best_items}:
            continue
        name = f"{_config_label(other)} vs {_config_label(best)}"
        comparisons.append(mcnemar(other_items, best_items, name=name))
    return comparisons


# --- figures ---------------------------------------------------------------------

_FAMILY_STYLE = {"rag": ("tab:blue", "o"), "no_rag": ("tab:red", "s")}


def _render_figures(report_dir: Path, leaderboard: List[ResultRow],
                    deltas: List[TechniqueDelta], rows: List[ResultRow],
                    notes: List[str]) -> Dict[str, Path]:
    written: Dict[str, Path] = {}

    # accuracy-runtime tradeoff, runtime on a log axis
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for family_key, (color, marker) in _FAMILY_STYLE.items():
        pts = [r for r in leaderboard if canon(r.family) == family_key and r.runtime > 0]
        if pts:
            ax.scatter([r.runtime for r in pts], [r.accuracy for r in pts],
                       c=color, marker=marker, label=pts[0].family, alpha=0.8)
    ax.set_xscale("log")
    ax.set_xlabel("runtime (s, log scale)")
    ax.set_ylabel("accuracy")
    ax.set_title("Accuracy-runtime tradeoff across configurations")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    path = report_dir / "tradeoff.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written["tradeoff_png"] = path

    # technique-delta bars
    if deltas:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        labels = [f"{d.axis}\n({d.first} vs {d.second})" for d in deltas]
        values = [d.mean_delta_accuracy for d in deltas]
        colors = ["tab:green" if v >= 0 else "tab:red" for v in values]
        ax.bar(range(len(values)), values, color=colors)
        ax.set_xticks(range(len(values)), labels, fontsize=8)
        ax.axhline(0.0, color="black", linewidth=0.8)
        ax.set_ylabel("mean accuracy delta")
        ax.set_title("Technique-level accuracy deltas")
        path = report_dir / "technique_deltas.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written["technique_deltas_png"] = path

    # paired embedding comparison within the fixed scope, when both sides exist
    try:
        delta = technique_deltas(rows, "index", where=EMBEDDING_COMPARISON_SCOPE)
    except ValueError:
        notes.append("embedding comparison skipped: no matched index pairs in scope")
        return written
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = []
    for pair in delta.pairs:
        coarse = pair.first_row.coarse_mode
        rer = pair.first_row.reranker
        labels.append(f"coarse {coarse}\nreranker {rer}")
    values = [p.delta_accuracy for p in delta.pairs]
    colors = ["tab:green" if v >= 0 else "tab:red" for v in values]
    ax.bar(range(len(values)), values, color=colors)
    ax.set_xticks(range(len(values)), labels, fontsize=8)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.axhline(delta.mean_delta_accuracy, color="tab:blue", linestyle="--",
               linewidth=1.0, label=f"mean {delta.mean_delta_accuracy:+.4f}")
    ax.set_ylabel(f"accuracy delta ({delta.first} - {delta.second})")
    ax.set_title("Embedding model paired comparison")
    ax.legend()
    path = report_dir / "embedding_comparison.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written["embedding_comparison_png"] = path
    return written
