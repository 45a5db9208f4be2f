"""Shared-backbone audio-visual self-supervised speaker embeddings, in numpy."""

__version__ = "0.1.0"
