"""Synthetic line datasets, a LoRA-adapted mini ViT, and error analysis for its angle predictions."""

__version__ = "0.1.0"
