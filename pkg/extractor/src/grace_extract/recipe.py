"""Extraction recipe: which model, how traces are segmented, where output goes."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

DEFAULT_STEP_PATTERN = r"(?m)^\s*(?:Step\s*\d+\s*[:.)]|\d+\s*[.)])\s*"
DEFAULT_ANSWER_PATTERN = r"(?mi)^\s*(?:final\s+)?answer\s*[:.]\s*"


@dataclass(frozen=True)
class ExtractionRecipe:
    """One extraction run.

    Traces are segmented either by the delimiter regexes (text mode) or by
    explicit pre-tokenized span annotations (span mode, see ``spans_path``).
    Samples whose segmentation yields no steps or an empty answer are
    logged and skipped, never emitted.
    """

    model_id: str
    checkpoint_id: str
    out_dir: Path
    step_pattern: str = DEFAULT_STEP_PATTERN
    answer_pattern: str = DEFAULT_ANSWER_PATTERN
    spans_path: Path | None = None
    batch_size: int = 4
    precision: str = "float32"
    dump_token_level: bool = False

    def __post_init__(self) -> None:
        if not self.checkpoint_id:
            raise ValueError("checkpoint id must be non-empty")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.precision not in ("float32",):
            raise ValueError(f"unsupported precision {self.precision!r}")
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.spans_path is not None:
            object.__setattr__(self, "spans_path", Path(self.spans_path))

    def describe(self) -> dict:
        """Recorded alongside outputs so a dump's provenance is auditable."""
        return {
            "model_id": self.model_id,
            "checkpoint_id": self.checkpoint_id,
            "mode": "spans" if self.spans_path is not None else "delimiter",
            "step_pattern": self.step_pattern,
            "answer_pattern": self.answer_pattern,
            "precision": self.precision,
            "dump_token_level": self.dump_token_level,
        }
