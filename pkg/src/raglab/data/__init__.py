"""Packaged data: the reference results-table fixture and the offline demo."""

from importlib import resources
from pathlib import Path


def _data_path(*parts: str) -> Path:
    return Path(resources.files(__package__).joinpath(*parts))  # type: ignore[arg-type]


def results_fixture_path() -> Path:
    """Reference results table (full published-format grid) for analysis tests."""
    return _data_path("table_a1.csv")


def demo_corpus_dir() -> Path:
    return _data_path("demo")


def demo_dataset_path() -> Path:
    return _data_path("demo", "questions.jsonl")


def demo_config_path() -> Path:
    return _data_path("demo", "run.json")
