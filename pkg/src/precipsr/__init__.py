"""Attention-based super-resolution downscaling for precipitation, with QM/BCSD baselines."""

__version__ = "0.1.0"
