"""Anchor-based Gaussian-splatting steganography with private neural decoders."""

__version__ = "0.1.0"
