"""Retrieval-guided self-correcting code generation engine and benchmark harness."""

__version__ = "0.1.0"
