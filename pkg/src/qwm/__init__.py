"""Morphology-conditioned latent world model for heterogeneous quadruped families."""

__version__ = "0.1.0"
