"""Noise-tolerant sketch retrieval: a stroke-subset selector trained with
clipped-surrogate policy optimization in front of a triplet-trained embedding
retriever, plus the oracles and metrics used to verify it."""

__version__ = "0.1.0"
