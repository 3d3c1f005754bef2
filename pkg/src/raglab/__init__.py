"""raglab: textbook RAG pipelines and a multiple-choice QA evaluation harness."""

__version__ = "0.1.0"
