"""Prototype correlation matching and class-relation reasoning for few-shot segmentation."""

from pmcr.core import Episode, Hyperparams, Rng, downsample_mask, read_tensor, write_tensor

__all__ = [
    "Episode",
    "Hyperparams",
    "Rng",
    "downsample_mask",
    "read_tensor",
    "write_tensor",
]

__version__ = "0.1.0"
