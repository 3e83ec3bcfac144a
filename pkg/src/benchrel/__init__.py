"""Repeated-run reliability analysis for probabilistic regression benchmarks."""

__version__ = "0.1.0"
