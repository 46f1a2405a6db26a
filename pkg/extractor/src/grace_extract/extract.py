"""Extraction pipeline: segment, tokenize, one forward pass, aggregate, write."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from .output import ExtractedSample, expected_gsig_size, write_gsig, write_samples_jsonl
from .recipe import ExtractionRecipe
from .segment import SegmentationError, segment_trace
from .signals import ModelHandle, batch_logits, segment_means, upstream_signals

log = logging.getLogger("grace_extract")


class Tokenizer(Protocol):
    def encode(self, text: str) -> list[int]: ...


@dataclass(frozen=True)
class PreparedRow:
    sample_id: str
    prompt_ids: tuple[int, ...]
    supervised_ids: tuple[int, ...]
    step_spans: tuple[tuple[int, int], ...]
    answer_span: tuple[int, int]


@dataclass(frozen=True)
class ExtractionSummary:
    emitted: int
    skipped: int
    supervised_tokens: int
    gsig_bytes: int
    samples_path: Path
    gsig_path: Path

    def to_mapping(self) -> dict[str, Any]:
        return {
            "emitted": self.emitted,
            "skipped": self.skipped,
            "supervised_tokens": self.supervised_tokens,
            "gsig_bytes": self.gsig_bytes,
            "samples_path": str(self.samples_path),
            "gsig_path": str(self.gsig_path),
        }


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    rows = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return rows


def prepare_text_row(row: dict[str, Any], tokenizer: Tokenizer,
                     recipe: ExtractionRecipe) -> PreparedRow:
    """Delimiter mode: segment the trace text, then tokenize each segment.

    Segments are tokenized independently and concatenated; the recipe
    records the delimiter rule so the segmentation is reproducible.
    """
    segmented = segment_trace(row["trace"], recipe.step_pattern, recipe.answer_pattern)
    prompt_ids = tokenizer.encode(row["prompt"])
    if not prompt_ids:
        raise SegmentationError("empty prompt after tokenization")
    pieces = [tokenizer.encode(text) for text in segmented.step_texts]
    answer_ids = tokenizer.encode(segmented.answer_text)
    if any(len(p) == 0 for p in pieces) or not answer_ids:
        raise SegmentationError("a segment tokenized to zero tokens")
    spans, cursor, flat = [], 0, []
    for piece in pieces + [answer_ids]:
        spans.append((cursor, cursor + len(piece)))
        cursor += len(piece)
        flat.extend(piece)
    return PreparedRow(
        sample_id=str(row["sample_id"]),
        prompt_ids=tuple(prompt_ids),
        supervised_ids=tuple(flat),
        step_spans=tuple(spans[:-1]),
        answer_span=spans[-1],
    )


def prepare_span_row(row: dict[str, Any]) -> PreparedRow:
    """Span mode: the row already carries token ids and span annotations."""
    prompt_ids = tuple(int(t) for t in row["prompt_ids"])
    supervised = tuple(int(t) for t in row["ids"])
    steps = tuple((int(s), int(e)) for s, e in row["steps"])
    answer = (int(row["answer"][0]), int(row["answer"][1]))
    if not prompt_ids:
        raise SegmentationError("empty prompt")
    if not steps or any(e <= s for s, e in steps) or answer[1] <= answer[0]:
        raise SegmentationError("spans must be non-empty with at least one step")
    if answer[1] > len(supervised):
        raise SegmentationError("answer span exceeds supervised tokens")
    return PreparedRow(str(row["sample_id"]), prompt_ids, supervised, steps, answer)


def prepare_rows(rows: Sequence[dict[str, Any]], recipe: ExtractionRecipe,
                 tokenizer: Tokenizer | None) -> tuple[list[PreparedRow], int]:
    """Returns (prepared rows, skipped count). Failures are logged, not raised."""
    span_rows = None
    if recipe.spans_path is not None:
        span_rows = {str(r["sample_id"]): r for r in read_jsonl(recipe.spans_path)}
    elif tokenizer is None:
        raise ValueError("delimiter mode needs a tokenizer")
    prepared, skipped = [], 0
    for row in rows:
        sample_id = str(row.get("sample_id", "?"))
        try:
            if span_rows is not None:
                if sample_id not in span_rows:
                    raise SegmentationError("no span annotation for this sample")
                prepared.append(prepare_span_row(span_rows[sample_id]))
            else:
                prepared.append(prepare_text_row(row, tokenizer, recipe))
        except (SegmentationError, KeyError) as exc:
            skipped += 1
            log.warning("skipping %s: %s", sample_id, exc)
    return prepared, skipped


def extract(recipe: ExtractionRecipe, rows: Sequence[dict[str, Any]],
            handle: ModelHandle, tokenizer: Tokenizer | None = None,
            pad_id: int = 0) -> ExtractionSummary:
    """Run one forward pass per batch, aggregate signals, write both outputs.

    No backward pass is ever invoked; the signal path asserts that the
    forward results carry no gradient graph.
    """
    prepared, skipped = prepare_rows(rows, recipe, tokenizer)
    if not prepared:
        raise ValueError("no sample survived segmentation")
    for row in prepared:
        bad = [t for t in row.supervised_ids if not 0 <= t < handle.vocab_size]
        if bad:
            raise ValueError(
                f"{row.sample_id}: token ids {bad[:3]} outside model vocabulary")

    extracted: list[ExtractedSample] = []
    for start in range(0, len(prepared), recipe.batch_size):
        chunk = prepared[start:start + recipe.batch_size]
        sequences = [list(r.prompt_ids) + list(r.supervised_ids) for r in chunk]
        per_sample_logits = batch_logits(handle, sequences, pad_id=pad_id)
        for row, logits in zip(chunk, per_sample_logits):
            signals = upstream_signals(logits, len(row.prompt_ids),
                                       row.supervised_ids, handle.head_weight)
            spans = list(row.step_spans) + [row.answer_span]
            means = segment_means(signals, spans)
            extracted.append(ExtractedSample(
                sample_id=row.sample_id,
                step_spans=row.step_spans,
                answer_span=row.answer_span,
                step_vectors=np.stack(means[:-1]),
                answer_vector=means[-1],
                token_vectors=signals if recipe.dump_token_level else None,
            ))

    recipe.out_dir.mkdir(parents=True, exist_ok=True)
    samples_path = recipe.out_dir / "samples.jsonl"
    gsig_path = recipe.out_dir / f"{recipe.checkpoint_id}.gsig"
    write_samples_jsonl(extracted, samples_path)
    written = write_gsig(extracted, gsig_path)
    if written != expected_gsig_size(extracted):
        raise RuntimeError(
            f"dump size {written} bytes does not match the layout model "
            f"({expected_gsig_size(extracted)} bytes)")
    (recipe.out_dir / "extraction_meta.json").write_text(
        json.dumps({"recipe": recipe.describe(),
                    "emitted": len(extracted), "skipped": skipped},
                   sort_keys=True, indent=2) + "\n")
    log.info("extracted %d samples (%d skipped) -> %s", len(extracted), skipped,
             gsig_path)
    return ExtractionSummary(
        emitted=len(extracted),
        skipped=skipped,
        supervised_tokens=sum(s.total_supervised_tokens for s in extracted),
        gsig_bytes=written,
        samples_path=samples_path,
        gsig_path=gsig_path,
    )
