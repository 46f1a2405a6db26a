"""Trace segmentation: split raw trace text into step texts and the answer."""

from __future__ import annotations

import re
from dataclasses import dataclass


class SegmentationError(ValueError):
    """The trace cannot be split into steps plus a non-empty answer."""


@dataclass(frozen=True)
class SegmentedTrace:
    step_texts: tuple[str, ...]
    answer_text: str


def segment_trace(trace: str, step_pattern: str, answer_pattern: str) -> SegmentedTrace:
    """Split a trace into step texts and an answer text.

    The answer starts at the first match of ``answer_pattern``; the body
    before it splits on ``step_pattern``. Whitespace-only fragments are
    dropped. Raises when no answer marker is found, the answer is empty,
    or no step survives.
    """
    answer_match = re.search(answer_pattern, trace)
    if answer_match is None:
        raise SegmentationError("no answer marker found")
    answer_text = trace[answer_match.end():].strip()
    if not answer_text:
        raise SegmentationError("empty answer after marker")
    body = trace[:answer_match.start()]
    pieces = re.split(step_pattern, body)
    steps = tuple(piece.strip() for piece in pieces if piece.strip())
    if not steps:
        raise SegmentationError("no reasoning steps before the answer")
    return SegmentedTrace(step_texts=steps, answer_text=answer_text)
