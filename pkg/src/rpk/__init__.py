"""Prune, linearly over-parameterize, fine-tune with similarity-preserving
distillation, then contract sequential convolutional networks."""

__version__ = "0.1.0"
