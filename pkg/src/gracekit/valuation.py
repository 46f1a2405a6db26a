"""Sample values, ranking, top-budget selection, and heuristic baselines."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .proxy import score_sample
from .types import (
    MatchingError,
    ReasoningSample,
    ScoreReport,
    ScoringConfig,
    SelectionResult,
    SignalRecord,
)

log = logging.getLogger("gracekit")


def sample_value(step_scores: Sequence[float]) -> float:
    """Mean of the per-step combined scores; the sample's ranking key."""
    if len(step_scores) == 0:
        raise ValueError("cannot average an empty list of step scores")
    return math.fsum(step_scores) / len(step_scores)


def combine_checkpoints(values: Sequence[float]) -> float:
    """Unweighted mean of the per-checkpoint values of one sample."""
    if len(values) == 0:
        raise ValueError("cannot combine an empty list of checkpoint values")
    return math.fsum(values) / len(values)


@dataclass
class ValueTable:
    """Per-checkpoint and combined values, keyed by sample id."""

    per_checkpoint: dict[str, dict[str, float]] = field(default_factory=dict)
    combined: dict[str, float] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(self.combined)

    @classmethod
    def from_reports(cls, reports: Iterable[ScoreReport],
                     checkpoints: Sequence[str], strict: bool = True) -> "ValueTable":
        table = cls(per_checkpoint={c: {} for c in checkpoints})
        for report in reports:
            if report.checkpoint_id not in table.per_checkpoint:
                raise MatchingError(
                    f"report for unknown checkpoint {report.checkpoint_id!r}")
            bucket = table.per_checkpoint[report.checkpoint_id]
            if report.sample_id in bucket:
                raise MatchingError(
                    f"duplicate report for {report.sample_id!r} at "
                    f"checkpoint {report.checkpoint_id!r}")
            bucket[report.sample_id] = report.value
        all_ids = set()
        for bucket in table.per_checkpoint.values():
            all_ids.update(bucket)
        skipped = 0
        for sample_id in sorted(all_ids):
            per = [table.per_checkpoint[c].get(sample_id) for c in checkpoints]
            if any(v is None for v in per):
                missing = [c for c, v in zip(checkpoints, per) if v is None]
                if strict:
                    raise MatchingError(
                        f"{sample_id}: missing value for checkpoints {missing}")
                skipped += 1
                continue
            table.combined[sample_id] = combine_checkpoints(per)
        if skipped:
            log.warning("dropped %d samples missing from some checkpoint", skipped)
        return table


def compute_budget(rho: float, n: int) -> int:
    """Exact ceil(rho * n), evaluating rho in its decimal form.

    ``rho=0.2, n=10`` must give 2, so the binary-float excess of literals
    like 0.2 cannot be allowed to leak into the ceiling; the shortest
    decimal representation of rho is taken as its value.
    """
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    if not 0.0 < rho < 1.0:
        raise ValueError(f"selection ratio must lie in (0, 1), got {rho}")
    return math.ceil(Fraction(str(rho)) * n)


def rank_values(values: Mapping[str, float]) -> list[tuple[str, float]]:
    """Descending by value; ties broken by ascending sample id."""
    for sample_id, value in values.items():
        if math.isnan(value):
            raise ValueError(f"{sample_id}: NaN value cannot be ranked")
    ordered_ids = sorted(values)
    # sorted() is stable and reverse=True keeps tied ids in ascending order
    return sorted(((i, values[i]) for i in ordered_ids),
                  key=lambda pair: pair[1], reverse=True)


def select_top(values: Mapping[str, float], rho: float) -> SelectionResult:
    """Retain the top ceil(rho * N) samples by value."""
    budget = compute_budget(rho, len(values))
    ranked = rank_values(values)
    return SelectionResult(
        rho=rho,
        budget=budget,
        ranked_ids=tuple(i for i, _ in ranked),
        ranked_values=tuple(v for _, v in ranked),
        selected_ids=tuple(i for i, _ in ranked[:budget]),
    )


def baseline_random(samples: Sequence[ReasoningSample], rho: float,
                    seed: int) -> SelectionResult:
    """Uniform sample without replacement.

    Values are draws from NumPy's PCG64 generator assigned to ids in
    ascending order, so the result depends only on (ids, seed), never on
    input order.
    """
    ids = sorted(s.sample_id for s in samples)
    rng = np.random.default_rng(seed)
    draws = rng.random(len(ids))
    return select_top(dict(zip(ids, draws.tolist())), rho)


def baseline_longest(samples: Sequence[ReasoningSample], rho: float) -> SelectionResult:
    """Rank by total supervised-token count."""
    values = {s.sample_id: float(s.total_supervised_tokens) for s in samples}
    return select_top(values, rho)


def baseline_stepmax(samples: Sequence[ReasoningSample], rho: float) -> SelectionResult:
    """Rank by number of reasoning steps."""
    values = {s.sample_id: float(s.num_steps) for s in samples}
    return select_top(values, rho)


def match_records(samples: Sequence[ReasoningSample],
                  records: Sequence[SignalRecord],
                  strict: bool = True) -> list[tuple[ReasoningSample, SignalRecord]]:
    """Pair samples with signal records by id.

    Strict mode errors on any unmatched id or step-count mismatch; lenient
    mode logs and skips them.
    """
    by_id: dict[str, SignalRecord] = {}
    for rec in records:
        if rec.sample_id in by_id:
            raise MatchingError(f"duplicate signal record for {rec.sample_id!r}")
        by_id[rec.sample_id] = rec
    sample_ids = [s.sample_id for s in samples]
    if len(set(sample_ids)) != len(sample_ids):
        raise MatchingError("duplicate sample ids in sample list")
    missing = [i for i in sample_ids if i not in by_id]
    extra = sorted(set(by_id) - set(sample_ids))
    if strict and (missing or extra):
        raise MatchingError(
            f"unmatched ids: {len(missing)} samples without signals "
            f"(first: {missing[:3]}), {len(extra)} signals without samples "
            f"(first: {extra[:3]})")
    if missing:
        log.warning("skipping %d samples without signal records", len(missing))
    if extra:
        log.warning("ignoring %d signal records without samples", len(extra))
    pairs: list[tuple[ReasoningSample, SignalRecord]] = []
    mismatched = 0
    for sample in samples:
        rec = by_id.get(sample.sample_id)
        if rec is None:
            continue
        if rec.num_steps != sample.num_steps:
            if strict:
                raise MatchingError(
                    f"{sample.sample_id}: sample has {sample.num_steps} steps, "
                    f"signal record has {rec.num_steps}")
            mismatched += 1
            continue
        pairs.append((sample, rec))
    if mismatched:
        log.warning("skipping %d samples with step-count mismatches", mismatched)
    return pairs


def score_dataset(samples: Sequence[ReasoningSample],
                  signals_by_checkpoint: Mapping[str, Sequence[SignalRecord]],
                  config: ScoringConfig, strict: bool = True,
                  jobs: int = 1) -> tuple[list[ScoreReport], ValueTable]:
    """Score every sample at every configured checkpoint.

    Per-sample scoring is pure and runs on a thread pool when jobs > 1; the
    output order is fixed by (sample id, checkpoint position) either way.
    """
    for ckpt in config.checkpoints:
        if ckpt not in signals_by_checkpoint:
            raise MatchingError(f"no signal records supplied for checkpoint {ckpt!r}")
    pairs_by_checkpoint = {
        ckpt: dict((s.sample_id, (s, r)) for s, r in
                   match_records(samples, signals_by_checkpoint[ckpt], strict=strict))
        for ckpt in config.checkpoints
    }
    shared_ids = None
    for ckpt, pairs in pairs_by_checkpoint.items():
        ids = set(pairs)
        shared_ids = ids if shared_ids is None else shared_ids & ids
    shared_ids = sorted(shared_ids or set())
    if not shared_ids:
        raise MatchingError("no sample is matched across all checkpoints")

    work = [pairs_by_checkpoint[ckpt][sid]
            for sid in shared_ids for ckpt in config.checkpoints]

    def run(pair: tuple[ReasoningSample, SignalRecord]) -> ScoreReport:
        return score_sample(pair[0], pair[1], config)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(run, work))
    else:
        reports = [run(pair) for pair in work]
    table = ValueTable.from_reports(reports, config.checkpoints, strict=strict)
    return reports, table
