"""Relevance-guided mixed-precision post-training quantization for a compact ViT."""

__version__ = "0.1.0"
