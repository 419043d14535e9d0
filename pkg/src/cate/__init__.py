"""Augmentation-aware contrastive video representation learning at desk scale."""

__version__ = "0.1.0"
