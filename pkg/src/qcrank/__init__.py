"""Query-cluster-aware learning-to-rank workbench."""

__version__ = "0.1.0"
