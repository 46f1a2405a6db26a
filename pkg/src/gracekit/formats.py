"""Interchange formats connecting the extractor, the engine, and trainers.

Samples travel as JSONL, one object per line. Signal dumps use GSIG v1, a
little-endian binary container holding float32 proxy vectors. Scores and
selections are JSONL with a leading header line that echoes the effective
configuration, so any output can be reproduced from its own header.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .types import (
    MatchingError,
    ReasoningSample,
    ScoreReport,
    SelectionResult,
    SignalFormatError,
    SignalRecord,
    TraceDataError,
)

GSIG_MAGIC = b"GSIG"
GSIG_VERSION = 1
_TOKEN_LEVEL_FLAG = 0x01

SCORES_SCHEMA = "grace-scores-v1"
SELECTION_SCHEMA = "grace-selection-v1"


def dumps_line(obj: Mapping[str, Any]) -> str:
    """Canonical one-line JSON: sorted keys, no whitespace, no NaN."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# samples JSONL


def sample_to_mapping(sample: ReasoningSample) -> dict[str, Any]:
    obj: dict[str, Any] = {
        "sample_id": sample.sample_id,
        "steps": [[start, end] for start, end in sample.step_spans],
        "answer": list(sample.answer_span),
    }
    if sample.source_meta:
        obj["meta"] = dict(sample.source_meta)
    return obj


def sample_from_mapping(raw: Mapping[str, Any]) -> ReasoningSample:
    try:
        sample_id = raw["sample_id"]
        steps = raw["steps"]
        answer = raw["answer"]
    except KeyError as exc:
        raise TraceDataError(f"missing field {exc.args[0]!r} in sample object") from exc
    if not answer:
        raise TraceDataError(f"{sample_id}: empty answer span")
    return ReasoningSample(
        sample_id=str(sample_id),
        step_spans=tuple((s[0], s[1]) for s in steps),
        answer_span=(answer[0], answer[1]),
        source_meta=raw.get("meta"),
    )


def read_samples(path: str | Path) -> list[ReasoningSample]:
    """Parse a samples JSONL file, reporting the line number on failure."""
    samples: list[ReasoningSample] = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceDataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            try:
                samples.append(sample_from_mapping(raw))
            except TraceDataError as exc:
                raise TraceDataError(f"{path}:{lineno}: {exc}") from exc
    return samples


def write_samples(samples: Iterable[ReasoningSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for sample in samples:
            handle.write(dumps_line(sample_to_mapping(sample)))


# ---------------------------------------------------------------------------
# GSIG binary signal dumps
#
# Layout (all little-endian):
#   header: magic "GSIG", u16 version, u32 hidden dim d, u8 flags
#           (flags bit0: records carry token-level vectors)
#   record: u32 id_len, id bytes (UTF-8), u32 K,
#           (K+1) * d float32 (step vectors in order, then the answer vector),
#           if token-level: u32 T, then T * (u32 token_index, d float32)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise SignalFormatError(message)


def write_signals(records: Sequence[SignalRecord], path: str | Path) -> None:
    """Write records as GSIG v1. Vectors are quantized to float32."""
    _require(len(records) > 0, "cannot write an empty signal dump")
    dim = records[0].hidden_dim
    token_level = records[0].token_level is not None
    for rec in records:
        _require(rec.hidden_dim == dim,
                 f"{rec.sample_id}: hidden dim {rec.hidden_dim} != file dim {dim}")
        _require((rec.token_level is not None) == token_level,
                 f"{rec.sample_id}: token-level presence differs from first record")
    flags = _TOKEN_LEVEL_FLAG if token_level else 0
    with open(path, "wb") as handle:
        handle.write(GSIG_MAGIC)
        handle.write(struct.pack("<HIB", GSIG_VERSION, dim, flags))
        for rec in records:
            ident = rec.sample_id.encode("utf-8")
            handle.write(struct.pack("<I", len(ident)))
            handle.write(ident)
            handle.write(struct.pack("<I", rec.num_steps))
            block = np.vstack([rec.step_proxies, rec.answer_proxy[None, :]])
            handle.write(block.astype("<f4").tobytes())
            if token_level:
                handle.write(struct.pack("<I", len(rec.token_level)))
                for idx, vec in rec.token_level:
                    handle.write(struct.pack("<I", idx))
                    handle.write(np.asarray(vec).astype("<f4").tobytes())


class _Cursor:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, count: int, what: str) -> bytes:
        end = self.pos + count
        _require(end <= len(self.buf),
                 f"{self.path}: truncated file while reading {what}")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.buf)


def read_signals(path: str | Path, checkpoint_id: str | None = None) -> list[SignalRecord]:
    """Decode a GSIG file. ``checkpoint_id`` defaults to the file stem."""
    path = Path(path)
    if checkpoint_id is None:
        checkpoint_id = path.stem
    cur = _Cursor(path.read_bytes(), str(path))
    magic = cur.take(4, "magic")
    _require(magic == GSIG_MAGIC, f"{path}: not a GSIG file (magic {magic!r})")
    version, dim, flags = struct.unpack("<HIB", cur.take(7, "header"))
    _require(version == GSIG_VERSION,
             f"{path}: unsupported GSIG version {version}")
    _require(dim >= 1, f"{path}: invalid hidden dim {dim} in header")
    token_level = bool(flags & _TOKEN_LEVEL_FLAG)
    records: list[SignalRecord] = []
    while not cur.exhausted:
        id_len = cur.u32("record id length")
        sample_id = cur.take(id_len, "record id").decode("utf-8")
        num_steps = cur.u32(f"{sample_id}: step count")
        _require(num_steps >= 1, f"{path}: {sample_id}: record has no steps")
        raw = cur.take((num_steps + 1) * dim * 4, f"{sample_id}: proxy vectors")
        block = np.frombuffer(raw, dtype="<f4").reshape(num_steps + 1, dim)
        _require(bool(np.isfinite(block).all()),
                 f"{path}: {sample_id}: non-finite proxy component")
        tokens = None
        if token_level:
            count = cur.u32(f"{sample_id}: token-level count")
            tokens = []
            for _ in range(count):
                idx = cur.u32(f"{sample_id}: token index")
                vec_raw = cur.take(dim * 4, f"{sample_id}: token vector")
                vec = np.frombuffer(vec_raw, dtype="<f4")
                _require(bool(np.isfinite(vec).all()),
                         f"{path}: {sample_id}: non-finite token-level component")
                tokens.append((idx, vec.astype(np.float64)))
            tokens = tuple(tokens)
        records.append(SignalRecord(
            sample_id=sample_id,
            step_proxies=block[:num_steps].astype(np.float64),
            answer_proxy=block[num_steps].astype(np.float64),
            checkpoint_id=checkpoint_id,
            token_level=tokens,
        ))
    return records


def verify_token_consistency(record: SignalRecord, sample: ReasoningSample,
                             rel_tol: float = 1e-6) -> None:
    """Check that span means of token-level vectors reproduce the stored proxies.

    Tolerance is relative to the proxy norm, sized for one float32 round trip.
    """
    if record.token_level is None:
        return
    if record.num_steps != sample.num_steps:
        raise MatchingError(
            f"{sample.sample_id}: sample has {sample.num_steps} steps, "
            f"signal record has {record.num_steps}")
    by_index = {idx: vec for idx, vec in record.token_level}
    spans = list(sample.step_spans) + [sample.answer_span]
    proxies = [record.step_proxies[k] for k in range(record.num_steps)]
    proxies.append(record.answer_proxy)
    for (start, end), stored in zip(spans, proxies):
        missing = [t for t in range(start, end) if t not in by_index]
        if missing:
            raise SignalFormatError(
                f"{record.sample_id}: token-level vectors missing for indices {missing[:5]}")
        mean = np.mean([by_index[t] for t in range(start, end)], axis=0)
        scale = max(float(np.linalg.norm(stored)), 1e-30)
        err = float(np.linalg.norm(mean - stored)) / scale
        if err > rel_tol:
            raise SignalFormatError(
                f"{record.sample_id}: span [{start}, {end}) token mean deviates "
                f"from stored proxy by relative {err:.3g} (> {rel_tol:g})")


# ---------------------------------------------------------------------------
# scores / selection JSONL


def scores_header(config_mapping: Mapping[str, Any], config_hash: str,
                  n_samples: int, strict: bool) -> dict[str, Any]:
    return {
        "kind": "header",
        "schema": SCORES_SCHEMA,
        "config": dict(config_mapping),
        "config_hash": config_hash,
        "n_samples": n_samples,
        "strict": strict,
    }


def write_scores(path: str | Path, header: Mapping[str, Any],
                 reports: Sequence[ScoreReport],
                 combined: Mapping[str, float],
                 per_checkpoint: Mapping[str, Mapping[str, float]]) -> None:
    """Write one header line, report lines grouped by sample, then one
    combined-value line per sample. Ordering is fixed by sample id."""
    checkpoints = list(header["config"]["checkpoints"])
    by_sample: dict[str, dict[str, ScoreReport]] = {}
    for report in reports:
        by_sample.setdefault(report.sample_id, {})[report.checkpoint_id] = report
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(dumps_line(header))
        for sample_id in sorted(by_sample):
            group = by_sample[sample_id]
            for ckpt in checkpoints:
                if ckpt in group:
                    handle.write(dumps_line(group[ckpt].to_mapping()))
            handle.write(dumps_line({
                "kind": "combined",
                "sample_id": sample_id,
                "value": combined[sample_id],
                "per_checkpoint": {c: per_checkpoint[c][sample_id]
                                   for c in checkpoints if sample_id in per_checkpoint[c]},
                "config_hash": header["config_hash"],
            }))


def read_scores(path: str | Path) -> tuple[dict[str, Any], list[ScoreReport], dict[str, float]]:
    """Return (header, per-checkpoint reports, combined values by id)."""
    header: dict[str, Any] | None = None
    reports: list[ScoreReport] = []
    combined: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceDataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            kind = raw.get("kind")
            if kind == "header":
                if raw.get("schema") != SCORES_SCHEMA:
                    raise TraceDataError(
                        f"{path}:{lineno}: unexpected schema {raw.get('schema')!r}")
                header = raw
            elif kind == "report":
                reports.append(ScoreReport.from_mapping(raw))
            elif kind == "combined":
                value = float(raw["value"])
                if math.isnan(value):
                    raise TraceDataError(f"{path}:{lineno}: NaN combined value")
                combined[raw["sample_id"]] = value
            else:
                raise TraceDataError(f"{path}:{lineno}: unknown line kind {kind!r}")
    if header is None:
        raise TraceDataError(f"{path}: missing scores header line")
    return header, reports, combined


def write_selection(path: str | Path, result: SelectionResult,
                    source_config_hash: str | None = None) -> None:
    header = {
        "kind": "header",
        "schema": SELECTION_SCHEMA,
        "rho": result.rho,
        "budget": result.budget,
        "n": len(result.ranked_ids),
        "tie_break": result.tie_break,
        "source_config_hash": source_config_hash,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(dumps_line(header))
        for row in result.to_mappings():
            handle.write(dumps_line(row))


def read_selection(path: str | Path) -> tuple[dict[str, Any], SelectionResult]:
    header: dict[str, Any] | None = None
    rows: list[dict[str, Any]] = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            raw = json.loads(line)
            if raw.get("kind") == "header":
                if raw.get("schema") != SELECTION_SCHEMA:
                    raise TraceDataError(
                        f"{path}:{lineno}: unexpected schema {raw.get('schema')!r}")
                header = raw
            elif raw.get("kind") == "row":
                rows.append(raw)
            else:
                raise TraceDataError(f"{path}:{lineno}: unknown line kind")
    if header is None:
        raise TraceDataError(f"{path}: missing selection header line")
    rows.sort(key=lambda r: r["rank"])
    result = SelectionResult(
        rho=float(header["rho"]),
        budget=int(header["budget"]),
        ranked_ids=tuple(r["sample_id"] for r in rows),
        ranked_values=tuple(float(r["value"]) for r in rows),
        selected_ids=tuple(r["sample_id"] for r in rows if r["selected"]),
        tie_break=header["tie_break"],
    )
    return header, result
