"""Weakly-supervised localization and segmentation of round bright targets.

Train a small GAP-headed CNN on image-level labels, read off nodule
activation maps from its FC weights, and turn those maps into pixel
masks via watershed scoping, multi-phase ICM labeling, and residual-map
candidate screening.
"""

from . import data, metrics, model, nam, segment, tensor
from .errors import NamsegError

__version__ = "0.1.0"

__all__ = ["data", "metrics", "model", "nam", "segment", "tensor", "NamsegError"]
