"""Saliency-selected, learnable-query fusion of acoustic and semantic speech features."""

__version__ = "0.1.0"
