"""Entropy-based question difficulty scoring and complexity-tiered SFT and
distillation data curation."""

__version__ = "0.1.0"
