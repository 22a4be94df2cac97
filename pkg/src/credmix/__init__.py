"""Contribution-aware multi-agent classification with Shapley credit assignment."""
__version__ = "0.1.0"
