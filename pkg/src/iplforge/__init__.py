"""Transducer training with cross-lingual pretraining and iterative pseudo-labeling."""

__version__ = "0.1.0"
