"""Sentence-level relation extraction with LLM support paragraphs and graph-refined entities."""

__version__ = "0.1.0"
