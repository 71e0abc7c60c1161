"""Unsupervised adversarial stereo depth estimation with cycled generators."""

__version__ = "0.1.0"
