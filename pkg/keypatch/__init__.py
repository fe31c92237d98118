"""SIFT keypoint based analysis of Vision Transformer self-attention."""

__version__ = "0.1"
