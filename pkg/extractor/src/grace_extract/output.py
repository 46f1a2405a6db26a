"""Writers for the interchange formats the scoring engine consumes.

Samples: JSONL, one object per line with half-open token spans. Signals:
GSIG v1, little-endian binary; header is magic "GSIG", u16 version, u32
hidden dim, u8 flags (bit 0 marks token-level payloads), then per record
u32 id length, UTF-8 id, u32 step count, (K+1) * d float32 vectors (steps
then answer), plus optional token-level entries.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

GSIG_MAGIC = b"GSIG"
GSIG_VERSION = 1
TOKEN_LEVEL_FLAG = 0x01


@dataclass(frozen=True)
class ExtractedSample:
    sample_id: str
    step_spans: tuple[tuple[int, int], ...]
    answer_span: tuple[int, int]
    step_vectors: np.ndarray  # (K, d) float32
    answer_vector: np.ndarray  # (d,) float32
    token_vectors: np.ndarray | None = None  # (T, d) float32, supervised order
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def num_steps(self) -> int:
        return len(self.step_spans)

    @property
    def hidden_dim(self) -> int:
        return int(self.answer_vector.shape[0])

    @property
    def total_supervised_tokens(self) -> int:
        spans = list(self.step_spans) + [self.answer_span]
        return sum(end - start for start, end in spans)


def sample_line(sample: ExtractedSample) -> str:
    obj: dict[str, Any] = {
        "sample_id": sample.sample_id,
        "steps": [[start, end] for start, end in sample.step_spans],
        "answer": list(sample.answer_span),
    }
    if sample.meta:
        obj["meta"] = sample.meta
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def write_samples_jsonl(samples: Sequence[ExtractedSample], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for sample in samples:
            handle.write(sample_line(sample))


def gsig_record_size(sample: ExtractedSample) -> int:
    base = 4 + len(sample.sample_id.encode("utf-8")) + 4 \
        + (sample.num_steps + 1) * sample.hidden_dim * 4
    if sample.token_vectors is not None:
        base += 4 + sample.token_vectors.shape[0] * (4 + sample.hidden_dim * 4)
    return base


def expected_gsig_size(samples: Sequence[ExtractedSample]) -> int:
    return 11 + sum(gsig_record_size(s) for s in samples)


def write_gsig(samples: Sequence[ExtractedSample], path: Path) -> int:
    """Write the signal dump; returns the byte count written."""
    if not samples:
        raise ValueError("refusing to write an empty signal dump")
    dim = samples[0].hidden_dim
    token_level = samples[0].token_vectors is not None
    for sample in samples:
        if sample.hidden_dim != dim:
            raise ValueError(f"{sample.sample_id}: hidden dim differs within dump")
        if (sample.token_vectors is not None) != token_level:
            raise ValueError(f"{sample.sample_id}: inconsistent token-level presence")
        for block in (sample.step_vectors, sample.answer_vector):
            if not np.isfinite(block).all():
                raise ValueError(f"{sample.sample_id}: non-finite signal component")
    flags = TOKEN_LEVEL_FLAG if token_level else 0
    with open(path, "wb") as handle:
        handle.write(GSIG_MAGIC)
        handle.write(struct.pack("<HIB", GSIG_VERSION, dim, flags))
        for sample in samples:
            ident = sample.sample_id.encode("utf-8")
            handle.write(struct.pack("<I", len(ident)))
            handle.write(ident)
            handle.write(struct.pack("<I", sample.num_steps))
            block = np.vstack([sample.step_vectors,
                               sample.answer_vector[None, :]]).astype("<f4")
            handle.write(block.tobytes())
            if token_level:
                handle.write(struct.pack("<I", sample.token_vectors.shape[0]))
                for index, vector in enumerate(sample.token_vectors):
                    handle.write(struct.pack("<I", index))
                    handle.write(vector.astype("<f4").tobytes())
    return Path(path).stat().st_size
