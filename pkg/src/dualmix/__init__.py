"""Few-shot node classification with dual-level mixup and a degree-aware SGC encoder."""

__version__ = "0.1.0"
