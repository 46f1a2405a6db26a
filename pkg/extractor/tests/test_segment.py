from __future__ import annotations

import pytest

from grace_extract.recipe import DEFAULT_ANSWER_PATTERN, DEFAULT_STEP_PATTERN
from grace_extract.segment import SegmentationError, segment_trace


def split(text: str):
    return segment_trace(text, DEFAULT_STEP_PATTERN, DEFAULT_ANSWER_PATTERN)


class TestSegmentTrace:
    def test_numbered_steps_and_answer(self):
        trace = ("Step 1: halve the input.\nStep 2: square it.\n"
                 "Step 3: subtract one.\nAnswer: 8")
        got = split(trace)
        assert got.step_texts == ("halve the input.", "square it.", "subtract one.")
        assert got.answer_text == "8"

    def test_bare_numbering_variant(self):
        got = split("1) first move\n2) second move\nAnswer: done")
        assert got.step_texts == ("first move", "second move")

    def test_final_answer_marker(self):
        got = split("Step 1: think.\nFinal Answer: 42")
        assert got.answer_text == "42"

    def test_missing_answer_marker_raises(self):
        with pytest.raises(SegmentationError, match="no answer marker"):
            split("Step 1: think.\nStep 2: think more.")

    def test_empty_answer_raises(self):
        with pytest.raises(SegmentationError, match="empty answer"):
            split("Step 1: think.\nAnswer:   ")

    def test_no_steps_raises(self):
        with pytest.raises(SegmentationError, match="no reasoning steps"):
            split("Answer: 42")

    def test_whitespace_fragments_dropped(self):
        got = split("Step 1:   \nStep 2: real work\nAnswer: ok")
        assert got.step_texts == ("real work",)
