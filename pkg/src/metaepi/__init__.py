"""Episodic meta-learning on synthetic class pools, with a small reverse-mode autodiff engine."""

__version__ = "0.1.0"
