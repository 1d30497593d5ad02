"""Diffusion prior over segmentation-backbone memory embeddings for prompt-free volume segmentation."""

__version__ = "0.1.0"
