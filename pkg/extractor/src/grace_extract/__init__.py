"""Forward-only signal extraction from causal LMs.

Runs one forward pass per sample, turns token probabilities and targets
into hidden-state gradient signals, averages them per reasoning segment,
and writes the samples/signals interchange files the scoring engine reads.
"""

from .extract import ExtractionSummary, extract
from .recipe import ExtractionRecipe
from .segment import SegmentationError, segment_trace
from .signals import ForwardOnlyViolation, ModelHandle, handle_from_hf

__all__ = [
    "ExtractionRecipe",
    "ExtractionSummary",
    "extract",
    "segment_trace",
    "SegmentationError",
    "ModelHandle",
    "handle_from_hf",
    "ForwardOnlyViolation",
]

__version__ = "0.1.0"
