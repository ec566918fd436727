"""Semi-supervised segmentation with weak-to-strong pseudo-labels and entropy-based sample filtering."""

__version__ = "0.1.0"
