"""Volumetric shape completion from a single depth view with an encoder-decoder GAN."""

__version__ = "0.1.0"
