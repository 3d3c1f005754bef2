"""Command-line entry point: the full workflow as subcommands.

Exit codes: 0 success, 2 config/schema violation, 3 missing or bad persisted
artifact, 4 provider failure, 1 anything else. Errors print as a single
machine-parsable line ``error: <category>: <message>`` on stderr. Every
subcommand accepts ``--dry-run`` to validate its inputs and print the
execution plan without side effects or provider calls.
"""

from __future__ import annotations

import functools
import json
import shutil
import sys
from pathlib import Path
from typing import Dict

import click

from . import data as packaged_data
from .config import RunConfig, load_run_config
from .errors import ConfigError, IndexFormatError, ProviderError, SchemaError
from .evaluation import (AXIS_COLUMNS, GridCell, GridResources, build_comparisons,
                         build_prompt, cells_from_axes, collect_run_items,
                         emit_report, extract_answer, load_dataset,
                         load_results_table, run_cell, run_grid)
from .evaluation.grid import GENERATION_PARAMS, format_result_row, append_result_row
from .indexes import (build_dense_index, build_section_index, build_sparse_index,
                      load_dense_index, load_section_index, load_sparse_index,
                      save_dense_index, save_section_index, save_sparse_index)
from .ingest import ingest_directory, read_chunks, write_chunks
from .providers import ProviderSpec, build_provider, cached
from .retrieval import IndexBundle, ProviderSet, run_pipeline


def _fail(code: int, category: str, message) -> None:
    click.echo(f"error: {category}: {message}", err=True)
    sys.exit(code)


def _cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, SchemaError) as exc:
            _fail(2, "config", exc)
        except (IndexFormatError, FileNotFoundError) as exc:
            _fail(3, "artifact", exc)
        except ProviderError as exc:
            _fail(4, "provider", exc)
    return wrapper


@click.group()
def main() -> None:
    """Textbook RAG pipelines and a multiple-choice QA evaluation harness."""


# --- provider / index resolution -------------------------------------------------


def _embedder_for(cfg: RunConfig, name: str):
    if name not in cfg.embedders:
        raise ConfigError(f"no embedding provider named {name!r} in config")
    provider = build_provider(cfg.embedders[name])
    if cfg.cache_dir:
        provider = cached(provider, "embedding", cfg.cache_dir / "embedding")
    return provider


def _generator_for(cfg: RunConfig, name: str):
    if name not in cfg.generators:
        raise ConfigError(f"no generator provider named {name!r} in config")
    provider = build_provider(cfg.generators[name])
    if cfg.cache_dir:
        provider = cached(provider, "generator", cfg.cache_dir / "generator")
    return provider


def _reranker_for(cfg: RunConfig):
    if cfg.reranker is None:
        return None
    provider = build_provider(cfg.reranker)
    if cfg.cache_dir:
        provider = cached(provider, "reranker", cfg.cache_dir / "reranker")
    return provider


def _load_bundle(cfg: RunConfig, name: str, need_sparse: bool,
                 need_sections: bool) -> IndexBundle:
    cfg.require("index_dir", "chunks_path")
    index_dir = cfg.index_dir / name
    if not index_dir.exists():
        raise IndexFormatError(f"index directory {index_dir} does not exist "
                               f"(run `raglab index` first)")
    chunks = {c.chunk_id: c for c in read_chunks(cfg.chunks_path)}
    dense = load_dense_index(index_dir)
    sparse = load_sparse_index(index_dir / "sparse.json") if need_sparse else None
    sections = load_section_index(index_dir) if need_sections else None
    return IndexBundle(dense=dense, chunks=chunks, sparse=sparse, sections=sections)


def _grid_resources(cfg: RunConfig, cells) -> GridResources:
    resources = GridResources(reranker=_reranker_for(cfg))
    for name in sorted({c.index for c in cells if c.is_rag}):
        need_sparse = any(c.index == name and c.retrieval_mode == "hybrid" for c in cells)
        need_sections = any(c.index == name and c.coarse_mode == "on" for c in cells)
        resources.index_bundles[name] = _load_bundle(cfg, name, need_sparse, need_sections)
        resources.embedders[name] = _embedder_for(cfg, name)
    for name in sorted({c.llm_model for c in cells}):
        resources.generators[name] = _generator_for(cfg, name)
    return resources


def _single_cell(cfg: RunConfig) -> GridCell:
    cfg.require("llm_model")
    if not cfg.rag:
        return GridCell("NO RAG", "none", "none", "none", "none", "none",
                        cfg.prompt_mode, cfg.llm_model)
    cfg.require("index")
    r = cfg.retrieval
    return GridCell("RAG", cfg.index, r.retrieval_mode, r.coarse, r.reranker,
                    r.reformulation, cfg.prompt_mode, cfg.llm_model)


# --- subcommands -----------------------------------------------------------------


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--in", "in_dir", type=click.Path(), default=None,
              help="Directory of UTF-8 .txt books.")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Output chunks JSONL path.")
@click.option("--max-tokens", type=int, default=None)
@click.option("--min-paragraph-tokens", type=int, default=None)
@click.option("--min-chunk-tokens", type=int, default=None)
@click.option("--dry-run", is_flag=True)
@_cli_errors
def ingest(config_path, in_dir, out_path, max_tokens, min_paragraph_tokens,
           min_chunk_tokens, dry_run):
    """Clean, segment, and chunk a corpus directory into a JSONL file."""
    overrides: Dict[str, object] = {}
    if in_dir:
        overrides["corpus_dir"] = str(Path(in_dir).resolve())
    if out_path:
        overrides["chunks_path"] = str(Path(out_path).resolve())
    chunk_overrides = {k: v for k, v in (("max_tokens", max_tokens),
                                         ("min_paragraph_tokens", min_paragraph_tokens),
                                         ("min_chunk_tokens", min_chunk_tokens))
                       if v is not None}
    if config_path:
        cfg = load_run_config(config_path, overrides)
        if chunk_overrides:
            merged = {**cfg.chunking.__dict__, **chunk_overrides}
            cfg = load_run_config(config_path, {**overrides, "chunking": merged})
    else:
        if not (in_dir and out_path):
            raise ConfigError("ingest needs --config or both --in and --out")
        from .ingest import ChunkingParams
        cfg = RunConfig(base_dir=Path.cwd(), corpus_dir=Path(in_dir).resolve(),
                        chunks_path=Path(out_path).resolve(),
                        chunking=ChunkingParams(**chunk_overrides))
    cfg.require("corpus_dir", "chunks_path")
    cfg.require_paths_exist("corpus_dir")
    if dry_run:
        click.echo(f"plan: ingest {cfg.corpus_dir} -> {cfg.chunks_path} "
                   f"with {cfg.chunking}")
        return
    chunks = ingest_directory(cfg.corpus_dir, cfg.chunking)
    Path(cfg.chunks_path).parent.mkdir(parents=True, exist_ok=True)
    write_chunks(chunks, cfg.chunks_path)
    click.echo(f"wrote {len(chunks)} chunks to {cfg.chunks_path}")


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--chunks", "chunks_path", type=click.Path(), default=None)
@click.option("--embedder", "embedder_name", default=None,
              help="Embedder name from config (or a raw mock:/http endpoint).")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--bm25", is_flag=True, help="Also build the BM25 sparse index.")
@click.option("--sections", is_flag=True, help="Also build the section-centroid index.")
@click.option("--dry-run", is_flag=True)
@_cli_errors
def index(config_path, chunks_path, embedder_name, out_dir, bm25, sections, dry_run):
    """Build dense (and optionally sparse/section) indexes from chunks."""
    cfg = load_run_config(config_path) if config_path else None
    chunks_file = Path(chunks_path) if chunks_path else (cfg.chunks_path if cfg else None)
    out_root = Path(out_dir) if out_dir else (cfg.index_dir if cfg else None)
    if chunks_file is None or out_root is None:
        raise ConfigError("index needs --chunks/--out or a config with "
                          "chunks_path/index_dir")
    if not chunks_file.exists():
        raise IndexFormatError(f"chunks file {chunks_file} does not exist")

    to_build: Dict[str, ProviderSpec] = {}
    if embedder_name and cfg and embedder_name in cfg.embedders:
        to_build[embedder_name] = cfg.embedders[embedder_name]
    elif embedder_name:
        to_build[embedder_name.split(":")[-1]] = ProviderSpec(
            kind="embedding", endpoint=embedder_name, model_tag=embedder_name)
    elif cfg and cfg.embedders:
        to_build.update(cfg.embedders)
    else:
        raise ConfigError("no embedder named and config lists none")

    if dry_run:
        extras = [name for name, flag in (("bm25", bm25), ("sections", sections)) if flag]
        click.echo(f"plan: index {chunks_file} with {sorted(to_build)} -> {out_root} "
                   f"(extras: {extras or 'none'})")
        return

    chunks = read_chunks(chunks_file)
    for name, spec in to_build.items():
        provider = build_provider(spec)
        if cfg and cfg.cache_dir:
            provider = cached(provider, "embedding", cfg.cache_dir / "embedding")
        dense = build_dense_index(chunks, provider, max_batch=spec.max_batch)
        target = out_root / name
        save_dense_index(dense, target)
        built = ["dense"]
        if bm25:
            save_sparse_index(build_sparse_index(chunks), target / "sparse.json")
            built.append("bm25")
        if sections:
            save_section_index(build_section_index(dense, chunks), target)
            built.append("sections")
        click.echo(f"built {'+'.join(built)} index for {name!r} at {target} "
                   f"({len(chunks)} chunks, dim {dense.dim})")


@main.command()
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--question", required=True)
@click.option("--dry-run", is_flag=True)
@_cli_errors
def retrieve(config_path, question, dry_run):
    """Run the retrieval pipeline for one question; print passages and trace."""
    cfg = load_run_config(config_path)
    cfg.require("index")
    if dry_run:
        click.echo(f"plan: retrieve with index {cfg.index!r} and {cfg.retrieval}")
        return
    bundle = _load_bundle(cfg, cfg.index,
                          need_sparse=cfg.retrieval.retrieval_mode == "hybrid",
                          need_sections=cfg.retrieval.coarse == "on")
    providers = ProviderSet(
        embedder=_embedder_for(cfg, cfg.index),
        generator=_generator_for(cfg, cfg.llm_model) if cfg.llm_model else None,
        reranker=_reranker_for(cfg),
    )
    context, trace = run_pipeline(question, cfg.retrieval, bundle, providers)
    for i, passage in enumerate(context.passages, start=1):
        click.echo(f"[{i}] ({passage.chunk_id}, {passage.n_tokens} tokens, "
                   f"score {passage.final_score:.4f})")
        click.echo(passage.text)
    click.echo(json.dumps(trace.as_dict(), ensure_ascii=False))


@main.command()
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--question", required=True)
@click.option("--dry-run", is_flag=True)
@_cli_errors
def ask(config_path, question, dry_run):
    """Answer one free-form question end to end (evidence, generation, letter)."""
    cfg = load_run_config(config_path)
    cfg.require("llm_model")
    if dry_run:
        click.echo(f"plan: ask via {cfg.llm_model!r} "
                   f"({'RAG ' + repr(cfg.index) if cfg.rag else 'NO RAG'})")
        return
    from .evaluation.dataset import MCQuestion

    evidence = None
    if cfg.rag:
        cfg.require("index")
        bundle = _load_bundle(cfg, cfg.index,
                              need_sparse=cfg.retrieval.retrieval_mode == "hybrid",
                              need_sections=cfg.retrieval.coarse == "on")
        providers = ProviderSet(
            embedder=_embedder_for(cfg, cfg.index),
            generator=_generator_for(cfg, cfg.llm_model),
            reranker=_reranker_for(cfg),
        )
        evidence, _ = run_pipeline(question, cfg.retrieval, bundle, providers)
        for i, passage in enumerate(evidence.passages, start=1):
            click.echo(f"evidence [{i}] ({passage.chunk_id}) {passage.text}")
    # ask accepts plain questions; options A/B are placeholders when the
    # question text does not carry its own lettered options
    mcq = MCQuestion(qid="ask", stem=question, options={"A": "yes", "B": "no"},
                     gold="A")
    prompt = build_prompt(mcq, evidence, cfg.prompt_mode)
    generator = _generator_for(cfg, cfg.llm_model)
    generation = generator.generate(prompt, GENERATION_PARAMS[cfg.prompt_mode])
    click.echo(f"generation: {generation}")
    click.echo(f"extracted: {extract_answer(generation, set(mcq.options))}")


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--dry-run", is_flag=True)
@_cli_errors
def eval_cmd(config_path, dry_run):
    """Evaluate the single configuration in the config over the dataset."""
    cfg = load_run_config(config_path)
    cfg.require("dataset_path", "out_dir")
    cfg.require_paths_exist("dataset_path")
    cell = _single_cell(cfg)
    if dry_run:
        click.echo(f"plan: eval cell {cell.as_row()} on {cfg.dataset_path}")
        return
    questions = load_dataset(cfg.dataset_path)
    resources = _grid_resources(cfg, [cell])
    run = run_cell(cell, questions, resources, cfg.retrieval, cfg.out_dir,
                   timing=cfg.timing)
    append_result_row(cfg.out_dir / "results.csv",
                      format_result_row(run.cell, run.accuracy, run.runtime_s))
    click.echo(f"accuracy {run.accuracy:.6f} ci95 ({run.ci95[0]:.4f}, {run.ci95[1]:.4f}) "
               f"runtime {run.runtime_s:.3f}s throughput {run.throughput:.3f}/s")


@main.command()
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--dry-run", is_flag=True)
@_cli_errors
def grid(config_path, dry_run):
    """Run the full experiment matrix from the config's grid axes."""
    cfg = load_run_config(config_path)
    cfg.require("dataset_path", "out_dir", "grid_axes")
    cfg.require_paths_exist("dataset_path")
    cells = cells_from_axes(cfg.grid_axes, generators=list(cfg.generators),
                            index_names=list(cfg.embedders))
    if dry_run:
        click.echo(f"plan: grid of {len(cells)} cells -> {cfg.out_dir}")
        for cell in cells:
            click.echo(f"plan: cell {','.join(getattr(cell, c) for c in AXIS_COLUMNS)}")
        return
    questions = load_dataset(cfg.dataset_path)
    resources = _grid_resources(cfg, cells)
    results = run_grid(cells, questions, resources, cfg.retrieval, cfg.out_dir,
                       timing=cfg.timing)
    click.echo(f"completed {len(results)} of {len(cells)} cells "
               f"-> {cfg.out_dir / 'results.csv'}")


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--results", "results_path", type=click.Path(), default=None,
              help="Results CSV (defaults to <out_dir>/results.csv).")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--n-items", type=int, default=None,
              help="Item count per run when no item logs exist (CI/throughput).")
@click.option("--ci", "ci_method", type=click.Choice(["wald", "wilson"]),
              default="wald", help="Interval method for the top-configs table.")
@click.option("--dry-run", is_flag=True)
@_cli_errors
def report(config_path, results_path, out_dir, n_items, ci_method, dry_run):
    """Regenerate every table and figure from persisted results (no inference)."""
    cfg = load_run_config(config_path) if config_path else None
    results_file = Path(results_path) if results_path else (
        cfg.out_dir / "results.csv" if cfg and cfg.out_dir else None)
    target = Path(out_dir) if out_dir else (cfg.out_dir if cfg and cfg.out_dir else None)
    if results_file is None or target is None:
        raise ConfigError("report needs --results/--out or a config with out_dir")
    if not results_file.exists():
        raise IndexFormatError(f"results table {results_file} does not exist")
    if dry_run:
        click.echo(f"plan: report from {results_file} -> {target / 'report'}")
        return
    rows = load_results_table(results_file)
    runs_dir = target / "runs"
    items_by_key = collect_run_items(rows, runs_dir) if runs_dir.exists() else {}
    comparisons = build_comparisons(rows, runs_dir) if runs_dir.exists() else []
    written = emit_report(rows, comparisons, target, n_items=n_items,
                          n_by_key={k: len(v) for k, v in items_by_key.items()},
                          ci_method=ci_method)
    for name in sorted(written):
        click.echo(f"wrote {written[name]}")


@main.command()
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--dry-run", is_flag=True)
@_cli_errors
def demo(out_dir, dry_run):
    """Materialize the bundled offline demo (corpus, dataset, run config)."""
    target = Path(out_dir)
    if dry_run:
        click.echo(f"plan: copy demo corpus, questions, run.json -> {target}")
        return
    (target / "corpus").mkdir(parents=True, exist_ok=True)
    for book in sorted(packaged_data.demo_corpus_dir().glob("*.txt")):
        shutil.copy(book, target / "corpus" / book.name)
    shutil.copy(packaged_data.demo_dataset_path(), target / "questions.jsonl")
    shutil.copy(packaged_data.demo_config_path(), target / "run.json")
    click.echo(f"demo ready under {target}; next:")
    click.echo(f"  raglab ingest --config {target / 'run.json'}")
    click.echo(f"  raglab index --config {target / 'run.json'} --bm25 --sections")
    click.echo(f"  raglab grid --config {target / 'run.json'}")
    click.echo(f"  raglab report --config {target / 'run.json'}")


if __name__ == "__main__":
    main()
