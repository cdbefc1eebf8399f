"""Perturbation-series Feynman-Kac densities for stable-like jump processes."""

__version__ = "0.1.0"
