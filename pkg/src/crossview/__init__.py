"""Desk-scale cross-view geo-localization.

A framework-free pipeline for matching drone imagery against a satellite
gallery: a weight-shared conv encoder with four permutation-attention
branches, curriculum batch sampling over geographic / feature-similarity /
random negatives, a three-term metric-learning loss, and a retrieval
evaluation suite with a position-shift robustness protocol.
"""

from .errors import CrossViewError
from .tensor import CHW, CWH, HWC, WCH, DimOrder, Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "CrossViewError",
    "Tensor",
    "DimOrder",
    "CHW",
    "HWC",
    "WCH",
    "CWH",
    "backward",
    "grad_check",
    "no_grad",
    "__version__",
]
