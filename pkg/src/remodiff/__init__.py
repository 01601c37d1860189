"""Retrieval-augmented text-to-motion diffusion on a numpy autodiff core."""

__version__ = "0.1.0"
